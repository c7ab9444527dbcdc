mod common;

use common::{micro_config, oracles, random, small_config, synth};
use datr_core::model::{
    decode_landmarks, gaussian_peak, gaussian_target, rescale_coords, Datr, Geometry, HeatmapRole, HeatmapStack,
    LandmarkSet, ModelConfig,
};
use datr_core::{Error, ParamStore, Session, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_gaussian_target(
        h in 8usize..40, w in 8usize..40, sigma in prop::sample::select(vec![1.0, 2.0, 3.0]),
        picks in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..6),
        normalize in any::<bool>(),
    ) {
        let g = Geometry::new(h, w);
        let coords: Vec<(f64, f64)> = picks
            .iter()
            .map(|&(a, b)| ((a * h as f64).floor().min(h as f64 - 1.0), (b * w as f64).floor().min(w as f64 - 1.0)))
            .collect();
        let l = LandmarkSet::new(coords, g).unwrap();
        let t = gaussian_target(&l, g, sigma, normalize).unwrap();
        prop_assert_eq!(decode_landmarks(&t), l);
    }

    #[test]
    fn rescale_round_trips(r in 0.0f64..63.0, c in 0.0f64..47.0, th in 8usize..200, tw in 8usize..200) {
        let a = Geometry::new(64, 48);
        let b = Geometry::new(th, tw);
        let there = rescale_coords(&[(r, c)], a, b);
        let back = rescale_coords(&there, b, a);
        prop_assert!((back[0].0 - r).abs() < 1e-9 && (back[0].1 - c).abs() < 1e-9);
    }

    #[test]
    fn target_values_follow_closed_form(li in 0usize..20, lj in 0usize..20, i in 0usize..20, j in 0usize..20, sigma in 0.5f64..5.0) {
        let g = Geometry::new(20, 20);
        let l = LandmarkSet::new(vec![(li as f64, lj as f64)], g).unwrap();
        let t = gaussian_target(&l, g, sigma, false).unwrap();
        let d2 = ((i as f64 - li as f64).powi(2) + (j as f64 - lj as f64).powi(2)) as f64;
        let want = (-d2 / (2.0 * sigma * sigma)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        prop_assert!((t.data.data()[i * 20 + j] - want).abs() < 1e-15);
    }
}

#[test]
fn random_interior_landmarks_decode_exactly() {
    oracles::heatmap(1000).unwrap();
}

#[test]
fn peak_amplitude() {
    assert!((gaussian_peak(3.0) - 0.132_981).abs() < 1e-6);
    let g = Geometry::new(16, 16);
    let l = LandmarkSet::new(vec![(5.0, 9.0)], g).unwrap();
    let t = gaussian_target(&l, g, 3.0, false).unwrap();
    let max = t.data.data().iter().cloned().fold(f64::MIN, f64::max);
    assert!((max - 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 3.0)).abs() < 1e-9);
}

#[test]
fn decode_ties_take_first_pixel() {
    let data = Tensor::from_f64(&[2, 2, 1], &[0.5, 0.9, 0.9, 0.1]).unwrap();
    let h = HeatmapStack::new(HeatmapRole::Fused, data).unwrap();
    assert_eq!(decode_landmarks(&h).coords(), &[(0.0, 1.0)]);
}

#[test]
fn landmarks_outside_geometry_are_rejected() {
    let g = Geometry::new(10, 10);
    assert!(LandmarkSet::new(vec![(10.0, 0.0)], g).is_err());
    assert!(LandmarkSet::new(vec![(0.0, -0.5)], g).is_err());
    assert!(gaussian_target(&LandmarkSet::new(vec![(1.0, 1.0)], g).unwrap(), g, 0.0, false).is_err());
}

fn model_with(config: ModelConfig, domains: &[(&str, usize)]) -> (Datr, ParamStore<f64>) {
    let mut model = Datr::new(config).unwrap();
    let mut store = ParamStore::new();
    model.init_shared(&mut store, 3).unwrap();
    for &(d, n) in domains {
        model.register_domain(&mut store, synth(d, n), 3).unwrap();
    }
    (model, store)
}

#[test]
fn pyramid_and_output_shapes() {
    for config in [micro_config(), small_config(), ModelConfig::toy()] {
        let (model, store) = model_with(config.clone(), &[("a", 3)]);
        let g = config.input;
        let mut sess = Session::inference(&store);
        let x = sess.graph.constant(random(&[2, g.height, g.width, 1], 1, 1.0));
        let pyramid = model.encoder.encode(&mut sess, x, "a").unwrap();
        for (s, &v) in pyramid.iter().enumerate() {
            let stride = config.encoder.patch_size << s;
            assert_eq!(
                sess.graph.shape(v),
                &[2, g.height / stride, g.width / stride, config.encoder.embed_dim << s]
            );
        }
        let out = model.forward(&mut sess, x, "a").unwrap();
        for v in [out.fused, out.fine, out.guidance] {
            assert_eq!(sess.graph.shape(v), &[2, g.height, g.width, 3]);
            assert!(sess.graph.value(v).data().iter().all(|&p| p >= 0.0 && p <= 1.0));
        }
    }
}

#[test]
fn fusion_is_elementwise_product_and_commutes() {
    let (model, store) = model_with(micro_config(), &[("a", 2)]);
    let mut sess = Session::inference(&store);
    let x = sess.graph.constant(random(&[2, 16, 16, 1], 2, 1.0));
    let out = model.forward(&mut sess, x, "a").unwrap();
    let swapped = sess.graph.mul(out.fine, out.guidance).unwrap();
    assert_eq!(sess.graph.value(swapped), sess.graph.value(out.fused));
    let (f, g, y) = (sess.graph.value(out.fine), sess.graph.value(out.guidance), sess.graph.value(out.fused));
    for i in 0..y.numel() {
        assert_eq!(y.data()[i], f.data()[i] * g.data()[i]);
    }
}

#[test]
fn unknown_domain_and_bad_geometry() {
    let (model, store) = model_with(micro_config(), &[("a", 2)]);
    let mut sess = Session::inference(&store);
    let x = sess.graph.constant(random(&[1, 16, 16, 1], 3, 1.0));
    assert!(matches!(model.forward(&mut sess, x, "zz"), Err(Error::UnknownDomain(_))));
    let bad = sess.graph.constant(random(&[1, 24, 16, 1], 3, 1.0));
    assert!(model.forward(&mut sess, bad, "a").is_err());
    let mut m2 = model.clone();
    let mut s2 = store.clone();
    assert!(matches!(m2.register_domain(&mut s2, synth("a", 3), 0), Err(Error::DuplicateDomain(_))));
}

#[test]
fn parameter_accounting() {
    let configs = [
        ("micro", micro_config()),
        ("small", small_config()),
        ("toy", ModelConfig::toy()),
        ("paper", ModelConfig::paper()),
    ];
    oracles::parameter_accounting(&configs).unwrap();
}

#[test]
fn domain_isolation() {
    oracles::domain_isolation(micro_config()).unwrap();
}

#[test]
fn every_domain_starts_from_the_same_draw() {
    let (_, store) = model_with(micro_config(), &[("a", 3), ("b", 3)]);
    for (n, t) in store.iter().filter(|(n, _)| n.starts_with("domain/a/")) {
        let other = n.replacen("domain/a/", "domain/b/", 1);
        assert_eq!(store.get(&other).unwrap(), t);
    }
}
