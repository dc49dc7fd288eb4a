use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::dataset::{distance_matrix, Canvas, Instance, Point};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model(variant: Variant, extractor: ExtractorConfig, seed: u64) -> (ParamStore, MilModel) {
    let mut store = ParamStore::new();
    let cfg = ModelConfig { variant, extractor, ..Default::default() };
    let m = MilModel::init(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, m)
}

fn random_bag(r: &mut ChaCha8Rng, n: usize) -> Bag {
    Bag {
        instances: (0..n)
            .map(|_| Instance {
                patch: (0..784).map(|_| r.random::<f32>()).collect(),
                centroid: Point::new(r.random_range(14.0..114.0), r.random_range(14.0..114.0)),
                digit: r.random_range(0..10),
            })
            .collect(),
        label: 0,
        canvas: Canvas { width: 128, height: 128 },
    }
}

fn score(store: &ParamStore, m: &MilModel, bag: &Bag) -> f64 {
    m.predict(store, bag).unwrap().0
}

#[test]
fn feature_shapes_and_zero_patch() {
    let (store, m) = model(Variant::MaxPool, ExtractorConfig::default(), 0);
    for n in [1, 3] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[n, 1, 28, 28]));
        let z = extract_features(&mut tape, &store, &m.extractor, x, Mode::Eval, &mut rng(0)).unwrap();
        assert_eq!(tape.shape(z), &[n, 32]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }
    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::zeros(&[2, 1, 27, 27]));
    assert!(matches!(
        extract_features(&mut tape, &store, &m.extractor, bad, Mode::Eval, &mut rng(0)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn extractor_shape_trace() {
    assert_eq!(ExtractorConfig::default().trace().unwrap(), [24, 12, 8, 4]);
    assert_eq!(ExtractorConfig::default().flat_len().unwrap(), 320);
    assert_eq!(ExtractorConfig::reduced().trace().unwrap(), [6, 3, 2, 1]);
    let too_small = ExtractorConfig { patch_side: 6, ..Default::default() };
    assert!(matches!(too_small.trace(), Err(Error::Config(_))));
}

#[test]
fn eval_forward_is_deterministic_and_in_range() {
    let mut r = rng(1);
    for variant in Variant::ALL {
        let (store, m) = model(variant, ExtractorConfig::default(), 1);
        let bag = random_bag(&mut r, 5);
        let (a, alpha) = m.predict(&store, &bag).unwrap();
        let (b, _) = m.predict(&store, &bag).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
        match variant {
            Variant::MaxPool => assert!(alpha.is_none()),
            Variant::Abmil => assert_eq!(alpha.unwrap().shape(), &[1, 5]),
            _ => assert_eq!(alpha.unwrap().shape(), &[5, 5]),
        }
    }
}

#[test]
fn zero_scorer_gives_half() {
    let (mut store, m) = model(Variant::DasMil, ExtractorConfig::default(), 2);
    store.get_mut(m.scorer_w).value = Tensor::zeros(&[32, 1]);
    let bag = random_bag(&mut rng(2), 4);
    assert_eq!(score(&store, &m, &bag), 0.5);
}

#[test]
fn empty_bag_is_rejected() {
    let (store, m) = model(Variant::DasMil, ExtractorConfig::default(), 3);
    let bag = Bag { instances: vec![], label: 0, canvas: Canvas { width: 128, height: 128 } };
    assert!(matches!(m.predict(&store, &bag), Err(Error::Precondition(_))));
}

#[test]
fn bce_formula() {
    assert!((bce_value(0.5, 0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((bce_value(0.5, 1, 2.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!(bce_value(1.0, 1, 1.0) < 1.1e-7);
    assert!(bce_value(0.0, 1, 1.0).is_finite());
    let mut tape = Tape::new();
    for (s, y, w) in [(0.3, 1u8, 1.0), (0.3, 0, 1.0), (0.9, 1, 3.5), (1e-9, 0, 2.0)] {
        let sv = tape.constant(Tensor::matrix(1, 1, vec![s]).unwrap());
        let l = weighted_bce(&mut tape, sv, y, w).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), bce_value(s, y, w));
    }
    // Unit weight is the ordinary cross-entropy.
    assert_eq!(bce_value(0.3, 1, 1.0), -(0.3f64).ln());
    assert_eq!(bce_value(0.3, 0, 1.0), -(0.7f64).ln());
}

#[test]
fn positive_weight_ratio() {
    assert_eq!(positive_weight([1, 0, 0, 1]).unwrap(), 1.0);
    assert_eq!(positive_weight([1, 0, 0, 0]).unwrap(), 3.0);
    assert!(positive_weight([0, 0]).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    assert!("transmil".parse::<Variant>().is_err());
}

#[test]
fn restore_round_trip_and_mismatch() {
    let (store, m) = model(Variant::DasMil, ExtractorConfig::default(), 4);
    let (m2, store2) = MilModel::restore(m.config.clone(), &store).unwrap();
    assert_eq!(store2, store);
    assert_eq!(m2, m);
    let sa = ModelConfig { variant: Variant::VanillaSa, ..Default::default() };
    assert!(matches!(MilModel::restore(sa, &store), Err(Error::CheckpointMismatch(_))));
    let wide = ModelConfig { extractor: ExtractorConfig { features: 16, ..Default::default() }, ..m.config.clone() };
    assert!(matches!(MilModel::restore(wide, &store), Err(Error::CheckpointMismatch(_))));
}

#[test]
fn max_pool_has_no_attention_params() {
    let (store, _) = model(Variant::MaxPool, ExtractorConfig::default(), 0);
    assert!(store.iter().all(|(_, p)| p.name.starts_with("cnn.") || p.name.starts_with("scorer.")));
}

#[test]
fn attention_is_reported_in_bag_order() {
    let (store, m) = model(Variant::DasMil, ExtractorConfig::default(), 5);
    let mut r = rng(5);
    let bag = random_bag(&mut r, 5);
    let (_, alpha) = m.predict(&store, &bag).unwrap();
    let alpha = alpha.unwrap();
    let mut rev = bag.clone();
    rev.instances.reverse();
    let (_, alpha_rev) = m.predict(&store, &rev).unwrap();
    let alpha_rev = alpha_rev.unwrap();
    for i in 0..5 {
        for j in 0..5 {
            assert_eq!(alpha.at2(i, j), alpha_rev.at2(4 - i, 4 - j));
        }
        assert!((alpha.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Patches for the reduced extractor plus centroids. Each instance gets its
/// own contrast so embeddings differ clearly; near-identical instances give
/// gradients close to the finite-difference noise floor.
fn reduced_inputs(r: &mut ChaCha8Rng, n: usize) -> (Tensor, Tensor) {
    let data = (0..n).flat_map(|i| {
        let gain = 1.0 + 2.0 * i as f64;
        (0..64).map(|_| gain * r.random::<f64>()).collect::<Vec<_>>()
    });
    let patches = Tensor::new(vec![n, 1, 8, 8], data.collect()).unwrap();
    let pts: Vec<Point> = (0..n).map(|_| Point::new(r.random_range(14.0..114.0), r.random_range(14.0..114.0))).collect();
    (patches, distance_matrix(&pts).as_tensor().clone())
}

/// Moves a freshly initialised model to a point where every parameter has a
/// gradient well above the finite-difference noise floor: biases off zero
/// (zero biases put ReLUs exactly on their kink when dropout clears an
/// input) and aggregator and scorer weights scaled up so attention is not
/// uniform.
fn condition_for_gradcheck(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if name.ends_with(".b") {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = crate::autodiff::normal(&shape, 0.1, r);
        } else if !name.starts_with("cnn.") && !name.ends_with("beta") && !name.ends_with("theta") {
            let v = store.value(id).map(|x| x * 4.0);
            store.get_mut(id).value = v;
        }
    }
}

#[test]
fn end_to_end_gradients_reduced() {
    for seed in 0..3 {
        for variant in Variant::ALL {
            let (mut store, m) = model(variant, ExtractorConfig::reduced(), seed);
            let mut r = rng(seed + 100);
            condition_for_gradcheck(&mut store, &mut r);
            let (patches, d) = reduced_inputs(&mut r, 3);
            for (label, mode) in [(1u8, Mode::Eval), (0, Mode::Train)] {
                let report = grad_check(&mut store, 1e-5, |s, tape| {
                    let out = m.forward(tape, s, &patches, &d, mode, &mut rng(99))?;
                    weighted_bce(tape, out.score, label, 1.5)
                })
                .unwrap();
                assert!(report.max_rel_error < 1e-4, "{variant}: {report:?}");
                assert_eq!(report.coordinates, store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum::<usize>());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn score_ignores_instance_order(seed in any::<u64>(), n in 2usize..7, vi in 0usize..5) {
        let mut r = rng(seed);
        let (store, m) = model(Variant::ALL[vi], ExtractorConfig::default(), seed);
        let bag = random_bag(&mut r, n);
        let mut shuffled = bag.clone();
        rand::seq::SliceRandom::shuffle(&mut shuffled.instances[..], &mut r);
        prop_assert_eq!(score(&store, &m, &bag).to_bits(), score(&store, &m, &shuffled).to_bits());
    }

    #[test]
    fn score_ignores_rigid_motion(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU, dx in -40.0f64..40.0) {
        let mut r = rng(seed);
        let (store, m) = model(Variant::DasMil, ExtractorConfig::default(), seed);
        let bag = random_bag(&mut r, 6);
        let mut moved = bag.clone();
        let (c, s) = (angle.cos(), angle.sin());
        for inst in &mut moved.instances {
            let p = inst.centroid;
            inst.centroid = Point::new(c * p.x - s * p.y + dx, s * p.x + c * p.y - dx);
        }
        prop_assert!((score(&store, &m, &bag) - score(&store, &m, &moved)).abs() < 1e-9);
    }
}
