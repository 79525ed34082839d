use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpr_core::head::{self, AggregationStrategy};
use tpr_core::{tpr, Graph, Tensor};

#[test]
fn mean_pool_matches_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[3, 6], -2.0, 2.0, &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let f = head::aggregate(&mut g, v, &[true; 3], AggregationStrategy::MeanPool, None, 3).unwrap();
    for j in 0..6 {
        let want = (x.get(&[0, j]) + x.get(&[1, j]) + x.get(&[2, j])) / 3.0;
        assert!((g.value(f).data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn concat_project_matches_padded_flatten() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let proj = Tensor::uniform(&[4, 12], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let p = g.constant(proj.clone());
    let f = head::aggregate(&mut g, v, &[true, true], AggregationStrategy::ConcatProject, Some(p), 4).unwrap();
    let mut flat = x.data().to_vec();
    flat.resize(12, 0.0);
    for r in 0..4 {
        let want: f64 = (0..12).map(|k| proj.get(&[r, k]) * flat[k]).sum();
        assert!((g.value(f).data()[r] - want).abs() < 1e-12);
    }
}

/// `−(1/B) Σ_b log softmax(z_b)[y_b] + λ penalty`, summed explicitly.
fn loss_oracle(zs: &[Vec<f64>], ys: &[usize], r: &Tensor, lambda: f64) -> f64 {
    let mut ce = 0.0;
    for (z, &y) in zs.iter().zip(ys) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce += lse - z[y];
    }
    let (d, n) = r.dims2();
    let mut pen = 0.0;
    for a in 0..d {
        for b in 0..d {
            let s: f64 = (0..n).map(|k| r.get(&[a, k]) * r.get(&[b, k])).sum();
            pen += (s - f64::from(a == b)).powi(2);
        }
    }
    for a in 0..n {
        for b in 0..n {
            let s: f64 = (0..d).map(|k| r.get(&[k, a]) * r.get(&[k, b])).sum();
            pen += (s - f64::from(a == b)).powi(2);
        }
    }
    ce / zs.len() as f64 + lambda * pen
}

#[test]
fn loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let zs: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let ys: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
        let r = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let vars: Vec<_> = zs.iter().map(|z| g.constant(Tensor::vector(z.clone()))).collect();
        let rv = g.constant(r.clone());
        let l = head::loss(&mut g, &vars, &ys, Some(rv), 0.01).unwrap();
        assert!((g.scalar(l) - loss_oracle(&zs, &ys, &r, 0.01)).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn classify_is_shift_invariant(z in prop::collection::vec(-10.0f64..10.0, 4), c in -50.0f64..50.0) {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::eye(4));
        let a = g.constant(Tensor::vector(z.clone()));
        let b = g.constant(Tensor::vector(z.iter().map(|v| v + c).collect()));
        let pa = head::classify(&mut g, a, eye).unwrap();
        let pb = head::classify(&mut g, b, eye).unwrap();
        prop_assert!(g.value(pa).max_abs_diff(g.value(pb)) < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative(z in prop::collection::vec(-10.0f64..10.0, 3), y in 0usize..3, seed in 0u64..1000) {
        let r = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut g = Graph::new();
        let zv = g.constant(Tensor::vector(z));
        let rv = g.constant(r);
        let l = head::loss(&mut g, &[zv], &[y], Some(rv), 0.5).unwrap();
        prop_assert!(g.scalar(l) >= 0.0);
    }

    #[test]
    fn mean_pool_commutes_with_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = [2, 0, 3, 1].iter().map(|&i| x.row(i).to_vec()).collect();
        let y = Tensor::from_rows(&rows).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(x), g.constant(y));
        let fa = head::aggregate(&mut g, a, &[true; 4], AggregationStrategy::MeanPool, None, 4).unwrap();
        let fb = head::aggregate(&mut g, b, &[true; 4], AggregationStrategy::MeanPool, None, 4).unwrap();
        prop_assert!(g.value(fa).max_abs_diff(g.value(fb)) < 1e-12);
    }
}

#[test]
fn penalty_term_uses_lambda() {
    let r = Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 2.0]).unwrap();
    assert_eq!(tpr::orthogonality_penalty_value(&r, 1.0), 36.0);
}
