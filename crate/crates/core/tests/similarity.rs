mod common;

use common::{acts_from, randn, tiny, tiny_data};
use proptest::prelude::*;
use tba_core::capture::{capture, sample_subset, CaptureOptions, Reduce};
use tba_core::rng::Rng;
use tba_core::similarity::{
    candidate_order, cka_tensors, cosine, cosine_tensors, mse, mse_tensors, rank_spans, similarity_matrix, Metric,
    ParamTable, SpanCandidate,
};
use tba_core::synth::{make_planted_model, Plant, PlantKind, PlantSpec};
use tba_core::{Span, Tensor};

fn naive_mse(x: &Tensor, y: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let mut row = 0.0;
        for j in 0..x.last_dim() {
            let d = y.get2(i, j) as f64 - x.get2(i, j) as f64;
            row += d * d;
        }
        total += row;
    }
    total / x.rows() as f64
}

fn orthogonal(d: usize, rng: &mut Rng) -> Tensor {
    // Gram-Schmidt on a random matrix
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / n).collect());
    }
    let flat: Vec<f64> = q.into_iter().flatten().collect();
    Tensor::from_f64(vec![d, d], &flat).unwrap()
}

#[test]
fn mse_examples() {
    let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
    let y = Tensor::from_rows(&[[1.0, 0.0], [1.0, 3.0]]).unwrap();
    assert_eq!(mse_tensors(&x, &y).unwrap(), 2.5);
    assert_eq!(mse_tensors(&y, &y).unwrap(), 0.0);
    let got = mse_tensors(&x.scale(3.0), &y.scale(3.0)).unwrap();
    assert!((got - 9.0 * 2.5).abs() < 1e-9);
}

#[test]
fn mse_matches_naive_loop() {
    let mut rng = Rng::new(21);
    for _ in 0..20 {
        let n = 1 + rng.below(100);
        let d = 1 + rng.below(16);
        let acts = acts_from((0..4).map(|_| randn(&[n, d], &mut rng)).collect());
        for s in 1..=4 {
            for e in 1..=4 {
                let want = naive_mse(acts.block(s).unwrap(), acts.block(e).unwrap());
                let got = mse(&acts, s, e).unwrap();
                assert!((got - want).abs() <= 1e-5 * want.max(1e-12), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn matrix_invariants_on_random_sets() {
    let mut rng = Rng::new(22);
    for _ in 0..10 {
        let acts = acts_from((0..5).map(|_| randn(&[30, 6], &mut rng)).collect());
        for metric in [Metric::Mse, Metric::Cosine, Metric::Cka] {
            let m = similarity_matrix(&acts, metric).unwrap();
            for s in 1..=5 {
                for e in 1..=5 {
                    let v = m.get(s, e);
                    assert_eq!(v, m.get(e, s));
                    match metric {
                        Metric::Mse => assert!(v >= 0.0),
                        Metric::Cosine => assert!((-1.0..=1.0).contains(&v)),
                        Metric::Cka => assert!((-1e-6..=1.0 + 1e-6).contains(&v)),
                    }
                }
                let diag = if metric == Metric::Mse { 0.0 } else { 1.0 };
                assert_eq!(m.get(s, s), diag);
            }
        }
    }
}

#[test]
fn cosine_examples() {
    let x = Tensor::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
    let y = Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
    assert!((cosine_tensors(&x, &y).unwrap() - 0.5).abs() < 1e-12);
    let r = randn(&[10, 4], &mut Rng::new(1));
    assert!((cosine_tensors(&r, &r).unwrap() - 1.0).abs() < 1e-9);
    let mut scaled = r.clone();
    for i in 0..10 {
        let c = 0.1 + i as f32;
        scaled.row_mut(i).iter_mut().for_each(|v| *v *= c);
    }
    let acts = acts_from(vec![r.clone(), scaled, randn(&[10, 4], &mut Rng::new(2))]);
    let base = cosine(&acts, 1, 3).unwrap();
    assert!((cosine(&acts, 2, 3).unwrap() - base).abs() < 1e-6);
}

#[test]
fn cka_invariances() {
    let mut rng = Rng::new(23);
    for _ in 0..5 {
        let x = randn(&[100, 8], &mut rng);
        let r = orthogonal(8, &mut rng);
        let xr = tba_core::linalg::matmul(&x, &r).unwrap();
        assert!((cka_tensors(&x, &x).unwrap().value - 1.0).abs() < 1e-9);
        assert!((cka_tensors(&x, &xr).unwrap().value - 1.0).abs() < 1e-5);
        let y = randn(&[100, 8], &mut rng);
        let base = cka_tensors(&x, &y).unwrap().value;
        assert!((cka_tensors(&x.scale(3.5), &y).unwrap().value - base).abs() < 1e-5);
        let yr = tba_core::linalg::matmul(&y, &r).unwrap();
        assert!((cka_tensors(&x, &yr).unwrap().value - base).abs() < 1e-5);
    }
}

#[test]
fn cka_independent_is_small() {
    let mut rng = Rng::new(24);
    let x = randn(&[2000, 8], &mut rng);
    let y = randn(&[2000, 8], &mut rng);
    assert!(cka_tensors(&x, &y).unwrap().value < 0.1);
    let c = cka_tensors(&Tensor::full(&[5, 3], 2.0), &y.slice_rows(0, 5)).unwrap();
    assert!(c.degenerate);
    assert_eq!(c.value, 0.0);
    assert!(cka_tensors(&x.slice_rows(0, 1), &y.slice_rows(0, 1)).is_err());
}

#[test]
fn two_block_toy_matrix() {
    let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
    let y = Tensor::from_rows(&[[1.0, 0.0], [1.0, 3.0]]).unwrap();
    let m = similarity_matrix(&acts_from(vec![x, y]), Metric::Mse).unwrap();
    assert_eq!(m.values.data(), &[0.0, 2.5, 2.5, 0.0]);
    let csv = m.to_csv();
    assert!(csv.as_str().starts_with("s,e,value\n"));
    assert!(csv.as_str().contains("1,2,2.5"));
    assert_eq!(m.to_dense_csv().as_str(), "0,2.5\n2.5,0\n");
}

#[test]
fn out_of_range_block_is_argument_error() {
    let acts = acts_from(vec![Tensor::zeros(&[2, 2]); 2]);
    assert!(matches!(mse(&acts, 1, 3), Err(tba_core::Error::Argument(_))));
}

#[test]
fn planted_identity_ranked_first() {
    let cfg = tiny(5, 8);
    let model = make_planted_model(&PlantSpec {
        base: cfg.clone(),
        plants: vec![Plant { span: Span::new(2, 3).unwrap(), kind: PlantKind::Identity }],
        noise_scale: 1.0,
        seed: 7,
    })
    .unwrap();
    let ds = tiny_data(3, 10, 0);
    let sub = sample_subset(&ds, 20, 1).unwrap();
    let acts = capture(&model, &ds, &sub, &CaptureOptions::new(Reduce::Mean)).unwrap();
    let m = similarity_matrix(&acts, Metric::Mse).unwrap();
    assert_eq!(m.get(2, 3), 0.0);
    let ranked = rank_spans(&m, 4, 3, &ParamTable::for_config(&cfg, false));
    assert_eq!(ranked[0].span, Span::new(2, 3).unwrap());
    assert_eq!(rank_spans(&m, 4, 1000, &ParamTable::for_config(&cfg, false)).len(), 4 + 3 + 2 + 1);
    assert_eq!(rank_spans(&m, 1, 1000, &ParamTable::for_config(&cfg, false)).len(), 4);
}

#[test]
fn equal_scores_prefer_larger_saving() {
    let a = SpanCandidate { span: Span::new(1, 2).unwrap(), score: 0.5, params_saved: 10 };
    let b = SpanCandidate { span: Span::new(1, 3).unwrap(), score: 0.5, params_saved: 20 };
    assert_eq!(candidate_order(Metric::Mse, &b, &a), std::cmp::Ordering::Less);
    assert_eq!(candidate_order(Metric::Cka, &b, &a), std::cmp::Ordering::Less);
}

fn check_sorted(metric: Metric, c: &[SpanCandidate]) -> Result<(), TestCaseError> {
    for w in c.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let better = if metric.lower_is_better() { a.score < b.score } else { a.score > b.score };
        let ok = better
            || (a.score == b.score
                && (a.params_saved > b.params_saved
                    || (a.params_saved == b.params_saved && (a.span.s, a.span.e) < (b.span.s, b.span.e))));
        prop_assert!(ok, "{:?} before {:?}", a, b);
    }
    Ok(())
}

proptest! {
    #[test]
    fn ranking_respects_tie_breaks(
        scores in prop::collection::vec(0u8..3, 36),
        metric_ix in 0usize..3,
        blocks in 2usize..7,
        max_len in 1usize..6,
    ) {
        let metric = [Metric::Mse, Metric::Cosine, Metric::Cka][metric_ix];
        let mut acts = acts_from(vec![Tensor::zeros(&[2, 2]); blocks]);
        acts.meta.num_samples = 2;
        let mut m = similarity_matrix(&acts, metric).unwrap();
        for s in 0..blocks {
            for e in 0..blocks {
                if s != e {
                    let v = scores[s.min(e) * 6 + s.max(e)] as f32 / 2.0;
                    m.values.set2(s, e, v);
                }
            }
        }
        let params = ParamTable { block_params: (0..blocks as u64).map(|k| 10 + 3 * (k % 2)).collect(), map_params: 4 };
        let ranked = rank_spans(&m, max_len, usize::MAX, &params);
        let expected: usize = (1..blocks).map(|s| (blocks - s).min(max_len)).sum();
        prop_assert_eq!(ranked.len(), expected);
        check_sorted(metric, &ranked)?;
        for c in &ranked {
            prop_assert!(c.span.s >= 1 && c.span.s < c.span.e && c.span.e <= blocks);
            prop_assert_eq!(c.score, m.get(c.span.s, c.span.e));
            prop_assert_eq!(c.params_saved, params.saved(c.span));
        }
    }
}
