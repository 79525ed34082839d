use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpr_core::gradcheck::{check_inputs, DEFAULT_STEP};
use tpr_core::graph::Var;
use tpr_core::{Graph, Result, Tensor};

const TOL: f64 = 1e-5;

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, lo, hi, &mut rng)
}

/// `Σ W ⊙ v` for a fixed random `W`, so every output entry gets its own weight.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(v).to_vec().as_slice(), -1.0, 1.0, seed ^ 0xabc));
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = check_inputs(inputs, DEFAULT_STEP, TOL, |g, xs| {
        let out = f(g, xs)?;
        project(g, out, 99)
    })
    .unwrap();
    let worst = report.worst().unwrap();
    assert!(report.passed(), "{name}: {} rel err {:e}", worst.name, worst.max_rel_err);
    assert!(
        report.params.iter().all(|p| p.max_abs_grad > 0.0),
        "{name}: some input received no gradient"
    );
}

#[test]
fn elementwise_ops() {
    let a = rand_t(&[3, 4], -2.0, 2.0, 1);
    let b = rand_t(&[3, 4], -2.0, 2.0, 2);
    check("add", &[a.clone(), b.clone()], |g, x| Ok(g.add(x[0], x[1])?));
    check("sub", &[a.clone(), b.clone()], |g, x| Ok(g.sub(x[0], x[1])?));
    check("mul", &[a.clone(), b.clone()], |g, x| Ok(g.mul(x[0], x[1])?));
    check("tanh", std::slice::from_ref(&a), |g, x| Ok(g.tanh(x[0])));
    check("sigmoid", std::slice::from_ref(&a), |g, x| Ok(g.sigmoid(x[0])));
    check("exp", std::slice::from_ref(&a), |g, x| Ok(g.exp(x[0])));
    check("gelu", std::slice::from_ref(&a), |g, x| Ok(g.gelu(x[0])));
    check("scale", std::slice::from_ref(&a), |g, x| Ok(g.scale(x[0], -1.7)));
    let pos = rand_t(&[3, 4], 0.5, 2.0, 3);
    check("log", &[pos], |g, x| Ok(g.log(x[0])));
    let s = rand_t(&[1], -2.0, 2.0, 4);
    check("mul_scalar", &[a.clone(), s], |g, x| Ok(g.mul_scalar(x[0], x[1])?));
    let row = rand_t(&[4], -2.0, 2.0, 5);
    check("add_row", &[a.clone(), row], |g, x| Ok(g.add_row(x[0], x[1])?));
    check("mask", &[a], |g, x| {
        let m = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        Ok(g.apply_mask(x[0], m)?)
    });
}

#[test]
fn matrix_ops() {
    let a = rand_t(&[3, 4], -2.0, 2.0, 10);
    let b = rand_t(&[4, 5], -2.0, 2.0, 11);
    let c = rand_t(&[5, 4], -2.0, 2.0, 12);
    check("matmul", &[a.clone(), b], |g, x| Ok(g.matmul(x[0], x[1])?));
    check("matmul_nt", &[a.clone(), c], |g, x| Ok(g.matmul_nt(x[0], x[1])?));
    check("transpose", std::slice::from_ref(&a), |g, x| Ok(g.transpose(x[0])?));
    let u = rand_t(&[3], -2.0, 2.0, 13);
    let v = rand_t(&[5], -2.0, 2.0, 14);
    check("outer", &[u, v], |g, x| Ok(g.outer(x[0], x[1])?));
    let p = rand_t(&[3, 2], -2.0, 2.0, 15);
    check("row_outer", &[a.clone(), p.clone()], |g, x| Ok(g.row_outer(x[0], x[1])?));
    check("concat0", &[a.clone(), rand_t(&[2, 4], -2.0, 2.0, 16)], |g, x| Ok(g.concat(&[x[0], x[1]], 0)?));
    check("concat1", &[a.clone(), p], |g, x| Ok(g.concat(&[x[0], x[1]], 1)?));
    check("slice_rows", std::slice::from_ref(&a), |g, x| Ok(g.slice_rows(x[0], 1, 3)?));
    check("slice_cols", std::slice::from_ref(&a), |g, x| Ok(g.slice_cols(x[0], 1, 3)?));
    check("reshape", std::slice::from_ref(&a), |g, x| Ok(g.reshape(x[0], &[2, 6])?));
    check("gather_rows", &[a], |g, x| Ok(g.gather_rows(x[0], &[2, 0, 2])?));
}

#[test]
fn reductions_and_normalizers() {
    let a = rand_t(&[3, 4], -2.0, 2.0, 20);
    check("sum", std::slice::from_ref(&a), |g, x| Ok(g.sum(x[0])));
    check("mean", std::slice::from_ref(&a), |g, x| Ok(g.mean(x[0])));
    check("max", std::slice::from_ref(&a), |g, x| Ok(g.max(x[0])?));
    check("mean_rows", std::slice::from_ref(&a), |g, x| Ok(g.mean_rows(x[0])?));
    check("max_rows", std::slice::from_ref(&a), |g, x| Ok(g.max_rows(x[0])?));
    check("softmax", std::slice::from_ref(&a), |g, x| Ok(g.softmax(x[0])));
    check("log_softmax", std::slice::from_ref(&a), |g, x| Ok(g.log_softmax(x[0])));
    check("frobenius_sq", std::slice::from_ref(&a), |g, x| Ok(g.frobenius_sq(x[0])));
    let gamma = rand_t(&[4], 0.5, 1.5, 21);
    let beta = rand_t(&[4], -1.0, 1.0, 22);
    check("layer_norm", &[a, gamma, beta], |g, x| Ok(g.layer_norm(x[0], x[1], x[2])?));
}

#[test]
fn dropout_gradient_matches_its_mask() {
    let a = rand_t(&[4, 6], -2.0, 2.0, 30);
    check("dropout", &[a], |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Ok(g.dropout(x[0], 0.3, &mut rng)?)
    });
}

#[test]
fn composite_chain() {
    let a = rand_t(&[3, 4], -2.0, 2.0, 40);
    let w = rand_t(&[4, 4], -1.0, 1.0, 41);
    check("chain", &[a, w], |g, x| {
        let h = g.matmul(x[0], x[1])?;
        let h = g.tanh(h);
        let s = g.softmax(h);
        let y = g.mul(s, x[0])?;
        Ok(g.max_rows(y)?)
    });
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2();
    let (_, n) = b.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for t in 0..50 {
        let (m, k, n) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
        let a = rand_t(&[m, k], -2.0, 2.0, 100 + t);
        let b = rand_t(&[k, n], -2.0, 2.0, 200 + t);
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let vc = g.matmul(va, vb).unwrap();
        assert!(g.value(vc).max_abs_diff(&c) < 1e-12);
        let bt = g.constant(b.transpose());
        let vd = g.matmul_nt(va, bt).unwrap();
        assert!(g.value(vd).max_abs_diff(&c) < 1e-12);
    }
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, tpr_core::tensor::TensorError::Dimension { .. }));
    let v = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, v).is_err());
}

proptest! {
    #[test]
    fn softmax_lies_on_simplex(xs in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(xs.clone()));
        let s = g.softmax(v);
        let p = g.value(s).data();
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 1..10), c in -100.0f64..100.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(xs.clone()));
        let b = g.constant(Tensor::vector(xs.iter().map(|x| x + c).collect()));
        let sa = g.softmax(a);
        let sb = g.softmax(b);
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    }

    #[test]
    fn transpose_is_an_involution(r in 1usize..6, c in 1usize..6, seed in 0u64..1000) {
        let a = rand_t(&[r, c], -2.0, 2.0, seed);
        prop_assert_eq!(a.transpose().transpose(), a);
    }
}
