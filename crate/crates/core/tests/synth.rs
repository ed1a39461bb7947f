mod common;

use common::{randn, tiny};
use tba_core::approx::{fit_linear, span_residual, Approximator};
use tba_core::capture::{capture, CaptureOptions, DataSubset, Reduce};
use tba_core::eval::probe::{extract_features, score, train_probe, Feature, ProbeConfig};
use tba_core::linalg::matmul;
use tba_core::rng::Rng;
use tba_core::synth::{make_planted_model, make_synth_dataset, random_model, random_plant_map, Plant, PlantKind, PlantSpec, SynthData, MAX_PLANT_CONDITION};
use tba_core::{Error, Span, Tensor, TransformerModel};

fn spec(plants: Vec<Plant>) -> PlantSpec {
    PlantSpec { base: tiny(6, 8), plants, noise_scale: 0.5, seed: 11 }
}

fn run_span(m: &TransformerModel, span: Span, x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for b in span.skipped_blocks() {
        y = m.block_forward(b, &y).unwrap();
    }
    y
}

#[test]
fn identity_plant_is_exact() {
    let span = Span::new(2, 4).unwrap();
    let m = make_planted_model(&spec(vec![Plant { span, kind: PlantKind::Identity }])).unwrap();
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let x = randn(&[5, 8], &mut rng).scale(3.0);
        for b in span.skipped_blocks() {
            assert!(m.block_forward(b, &x).unwrap().bitwise_eq(&x));
        }
    }
}

#[test]
fn linear_and_affine_plants_compose_exactly() {
    let mut rng = Rng::new(2);
    let a = random_plant_map(8, 0.3, &mut rng);
    let c = randn(&[8], &mut rng);
    let lin = Span::new(1, 3).unwrap();
    let aff = Span::new(4, 6).unwrap();
    let m = make_planted_model(&spec(vec![
        Plant { span: lin, kind: PlantKind::Linear(a.clone()) },
        Plant { span: aff, kind: PlantKind::Affine(a.clone(), c.clone()) },
    ]))
    .unwrap();
    for _ in 0..100 {
        let x = randn(&[5, 8], &mut rng);
        let want = matmul(&x, &a).unwrap();
        assert!(run_span(&m, lin, &x).max_abs_diff(&want) < 1e-5);
        let want = want.add_row_vector(c.data()).unwrap();
        assert!(run_span(&m, aff, &x).max_abs_diff(&want) < 1e-5);
    }
}

#[test]
fn plant_maps_are_well_conditioned() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let a = random_plant_map(16, 0.3, &mut rng);
        let m = nalgebra::DMatrix::from_row_slice(16, 16, &a.to_f64());
        let sv = m.singular_values();
        assert!(sv.max() / sv.min() <= MAX_PLANT_CONDITION);
        for j in 0..16 {
            assert!((m.column(j).sum() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn no_plants_is_plain_random_model() {
    let m = make_planted_model(&spec(vec![])).unwrap();
    let r = random_model(tiny(6, 8), 0.5, 11).unwrap();
    assert_eq!(m.to_container().unwrap().to_bytes(), r.to_container().unwrap().to_bytes());
}

#[test]
fn infeasible_plants_are_spec_errors() {
    let span = Span::new(2, 4).unwrap();
    let bad_shape = spec(vec![Plant { span, kind: PlantKind::Linear(Tensor::eye(4)) }]);
    assert!(matches!(make_planted_model(&bad_shape), Err(Error::Spec(_))));
    // non-unit column sums cannot pass the centering norm
    let bad_sums = spec(vec![Plant { span, kind: PlantKind::Linear(Tensor::eye(8).scale(2.0)) }]);
    assert!(matches!(make_planted_model(&bad_sums), Err(Error::Spec(_))));
    let past = spec(vec![Plant { span: Span::new(5, 7).unwrap(), kind: PlantKind::Identity }]);
    assert!(matches!(make_planted_model(&past), Err(Error::Spec(_))));
    let overlap = spec(vec![
        Plant { span, kind: PlantKind::Identity },
        Plant { span: Span::new(4, 5).unwrap(), kind: PlantKind::Identity },
    ]);
    assert!(matches!(make_planted_model(&overlap), Err(Error::Spec(_))));
    let mut narrow = spec(vec![Plant { span, kind: PlantKind::Linear(random_plant_map(8, 0.3, &mut Rng::new(0))) }]);
    narrow.base.mlp_hidden = 12;
    assert!(matches!(make_planted_model(&narrow), Err(Error::Spec(_))));
}

#[test]
fn planted_linear_span_fits_to_near_zero() {
    let span = Span::new(2, 5).unwrap();
    let a = random_plant_map(8, 0.3, &mut Rng::new(4));
    let m = make_planted_model(&spec(vec![Plant { span, kind: PlantKind::Linear(a) }])).unwrap();
    let ds = make_synth_dataset(&SynthData::new(3, 10, 8, 3, 2.0, 0)).unwrap();
    let acts = capture(&m, &ds, &DataSubset::all(&ds), &CaptureOptions::new(Reduce::All)).unwrap();
    let map = fit_linear(&acts, span, false, 1e-6).unwrap();
    let xe = acts.block(span.e).unwrap();
    let energy = xe.frobenius().powi(2) / xe.rows() as f64;
    assert!(map.meta.residual <= 1e-6 * energy);
    assert!(span_residual(&acts, span, &Approximator::Identity).unwrap() > 1e3 * map.meta.residual);
}

#[test]
fn dataset_is_deterministic_and_balanced() {
    let s = SynthData::new(7, 13, 8, 3, 1.0, 5);
    let a = make_synth_dataset(&s).unwrap();
    let b = make_synth_dataset(&s).unwrap();
    assert_eq!(a.to_container().unwrap().to_bytes(), b.to_container().unwrap().to_bytes());
    let mut hist = [0usize; 7];
    a.labels.iter().for_each(|&l| hist[l] += 1);
    assert!(hist.iter().all(|&h| h == 13));
    let other = make_synth_dataset(&s.split("test", 1)).unwrap();
    assert_ne!(other.images, a.images);
    assert_eq!(other.meta.split, "test");
    assert!(a.meta.extra.as_ref().unwrap().get("pixel_error_bound").is_some());
}

#[test]
fn two_classes_are_probe_separable() {
    let m = random_model(tiny(4, 8), 0.5, 3).unwrap();
    let ds = make_synth_dataset(&SynthData::new(2, 16_000, 8, 3, 4.0, 9)).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let f = extract_features(&m, &ds, &idx, Feature::Cls).unwrap();
    let probe = train_probe(&f, &ds.labels, 2, &ProbeConfig::default(), 0).unwrap();
    let (acc, ..) = score(&probe.predict(&f), &ds.labels, 2).unwrap();
    assert!(acc >= 0.99, "{acc}");
}
