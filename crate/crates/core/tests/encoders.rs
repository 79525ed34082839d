use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpr_core::encoders::{self, BackboneConfig, POSITION_EMBEDDING, TOKEN_EMBEDDING};
use tpr_core::gradcheck::{check_params, tiny_config, DEFAULT_STEP};
use tpr_core::nn::Dropout;
use tpr_core::tpr::TprConfig;
use tpr_core::{Graph, Model, ModelFamily, ParamSet, Tensor, TprParams};

fn backbone(layers: usize) -> BackboneConfig {
    BackboneConfig {
        vocab_size: 11,
        hidden: 8,
        layers,
        heads: 2,
        max_len: 8,
        ffn_dim: 12,
        dropout: 0.0,
    }
}

fn init(cfg: &BackboneConfig, seed: u64) -> ParamSet {
    let mut ps = ParamSet::new();
    cfg.init_params(&mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
    ps
}

fn encode(ps: &ParamSet, cfg: &BackboneConfig, tokens: &[usize], keep: &[bool]) -> Tensor {
    let mut g = Graph::new();
    let pv = ps.bind_frozen(&mut g);
    let v = encoders::encode_backbone(&mut g, &pv, cfg, tokens, keep, &mut Dropout::off()).unwrap();
    g.value(v).clone()
}

fn layer_norm(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(i, x)| gamma[i] * (x - mu) / (var + 1e-5).sqrt() + beta[i])
        .collect()
}

#[test]
fn zero_layers_is_token_plus_position() {
    let cfg = backbone(0);
    let ps = init(&cfg, 1);
    let out = encode(&ps, &cfg, &[7], &[true]);
    let tok = ps.expect(TOKEN_EMBEDDING).row(7);
    let pos = ps.expect(POSITION_EMBEDDING).row(0);
    for j in 0..8 {
        assert_eq!(out.get(&[0, j]), tok[j] + pos[j]);
    }
}

#[test]
fn permutation_equivariant_without_positions() {
    let cfg = backbone(2);
    let mut ps = init(&cfg, 2);
    *ps.get_mut(POSITION_EMBEDDING).unwrap() = Tensor::zeros(&[8, 8]);
    let a = encode(&ps, &cfg, &[1, 4, 5, 9], &[true; 4]);
    let b = encode(&ps, &cfg, &[1, 9, 5, 4], &[true; 4]);
    for (i, j) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
        for (x, y) in a.row(i).iter().zip(b.row(j)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zeroed_mixing_weights_reduce_to_double_layer_norm() {
    let cfg = backbone(0);
    let mut ps = init(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = encoders::symbol_transformer(8, 2, 12);
    layer.init(&mut ps, &mut rng);
    for name in layer.mixing_param_names() {
        let t = ps.get_mut(&name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    // Non-trivial norm parameters so both norms are exercised.
    for ln in ["ln1", "ln2"] {
        for p in ["g", "b"] {
            let name = format!("tprenc.sym.{ln}.{p}");
            *ps.get_mut(&name).unwrap() = Tensor::uniform(&[8], 0.5, 1.5, &mut rng);
        }
    }
    let v = Tensor::uniform(&[3, 8], -2.0, 2.0, &mut rng);
    let mut g = Graph::new();
    let pv = ps.bind_frozen(&mut g);
    let vv = g.constant(v.clone());
    let out = layer.forward(&mut g, &pv, vv, None, &mut Dropout::off()).unwrap();
    let p = |n: &str| ps.expect(&format!("tprenc.sym.{n}")).data().to_vec();
    for i in 0..3 {
        let once = layer_norm(v.row(i), &p("ln1.g"), &p("ln1.b"));
        let twice = layer_norm(&once, &p("ln2.g"), &p("ln2.b"));
        for (x, y) in g.value(out).row(i).iter().zip(&twice) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn symbol_and_role_encoders_differ() {
    let cfg = tiny_config(ModelFamily::TprTransformer);
    let m: Model = Model::init(cfg.clone(), 4).unwrap();
    let mut g = Graph::new();
    let pv = m.params.bind_frozen(&mut g);
    let v = g.constant(Tensor::uniform(&[4, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
    let (hs, hr) =
        encoders::tpr_encode_transformer(&mut g, &pv, &cfg.backbone, v, None, &mut Dropout::off()).unwrap();
    assert_eq!(g.shape(hs), &[4, 8]);
    assert!(g.value(hs).max_abs_diff(g.value(hr)) > 1e-3);
}

fn lstm_model(seed: u64) -> (Model, TprConfig) {
    let cfg = tiny_config(ModelFamily::TprLstm);
    let tpr_cfg = cfg.tpr.clone();
    (Model::init(cfg, seed).unwrap(), tpr_cfg)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop LSTM step with gate order i, f, g, o.
fn lstm_step(ps: &ParamSet, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let wih = ps.expect(&format!("{prefix}.w_ih"));
    let whh = ps.expect(&format!("{prefix}.w_hh"));
    let b = ps.expect(&format!("{prefix}.b")).data();
    let hd = h.len();
    let z: Vec<f64> = (0..4 * hd)
        .map(|r| {
            b[r] + x.iter().enumerate().map(|(k, v)| wih.get(&[r, k]) * v).sum::<f64>()
                + h.iter().enumerate().map(|(k, v)| whh.get(&[r, k]) * v).sum::<f64>()
        })
        .collect();
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for u in 0..hd {
        let (i, f, g, o) = (sigmoid(z[u]), sigmoid(z[hd + u]), z[2 * hd + u].tanh(), sigmoid(z[3 * hd + u]));
        c2[u] = f * c[u] + i * g;
        h2[u] = o * c2[u].tanh();
    }
    (h2, c2)
}

#[test]
fn lstm_encoder_matches_hand_unrolled_reference() {
    let (m, tcfg) = lstm_model(5);
    let tp: TprParams = m.tpr_params().unwrap();
    let v = Tensor::uniform(&[3, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let mut g = Graph::new();
    let pv = m.params.bind_frozen(&mut g);
    let vv = g.constant(v.clone());
    let out = encoders::tpr_encode_lstm(&mut g, &pv, &tcfg, vv).unwrap();

    let width = tcfg.d_sym * tcfg.d_role;
    let mut x_prev = vec![0.0; width];
    let (mut cs, mut cr) = (vec![0.0; width], vec![0.0; width]);
    for t in 0..3 {
        let (hs, cs2) = lstm_step(&m.params, "tprenc.sym", v.row(t), &x_prev, &cs);
        let (hr, cr2) = lstm_step(&m.params, "tprenc.role", v.row(t), &x_prev, &cr);
        let a_s = tp.attend_symbols(&Tensor::vector(hs.clone())).unwrap();
        let a_r = tp.attend_roles(&Tensor::vector(hr.clone())).unwrap();
        let x = tp.bind(&a_s, &a_r).unwrap();
        for (a, b) in g.value(out.h_sym[t]).data().iter().zip(&hs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(out.h_role[t]).data().iter().zip(&hr) {
            assert!((a - b).abs() < 1e-12);
        }
        let row = g.value(out.binding.bound).row(t).to_vec();
        for (a, b) in row.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        }
        x_prev = x.into_data();
        cs = cs2;
        cr = cr2;
    }
}

#[test]
fn lstm_first_step_ignores_recurrent_weights() {
    let (mut m, tcfg) = lstm_model(6);
    let v = Tensor::uniform(&[1, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let run = |m: &Model| {
        let mut g = Graph::new();
        let pv = m.params.bind_frozen(&mut g);
        let vv = g.constant(v.clone());
        let out = encoders::tpr_encode_lstm(&mut g, &pv, &tcfg, vv).unwrap();
        g.value(out.binding.bound).clone()
    };
    let before = run(&m);
    for name in ["tprenc.sym.w_hh", "tprenc.role.w_hh"] {
        let t = m.params.get_mut(name).unwrap();
        *t = t.map(|x| x * 7.0 + 1.0);
    }
    assert_eq!(run(&m), before);
}

#[test]
fn lstm_zero_fixed_point() {
    let (mut m, tcfg) = lstm_model(7);
    for name in ["tprenc.sym.b", "tprenc.role.b"] {
        let t = m.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let mut g = Graph::new();
    let pv = m.params.bind_frozen(&mut g);
    let vv = g.constant(Tensor::zeros(&[1, 8]));
    let out = encoders::tpr_encode_lstm(&mut g, &pv, &tcfg, vv).unwrap();
    assert!(g.value(out.h_sym[0]).data().iter().all(|&x| x == 0.0));
    assert!(g.value(out.h_role[0]).data().iter().all(|&x| x == 0.0));
}

#[test]
fn forward_is_deterministic() {
    for fam in ModelFamily::ALL {
        let mut cfg = tiny_config(fam);
        cfg.backbone.dropout = 0.1;
        let a: Model = Model::init(cfg.clone(), 8).unwrap();
        let b: Model = Model::init(cfg, 8).unwrap();
        let pa = a.predict_proba(&[1, 2, 3, 4]).unwrap();
        let pb = b.predict_proba(&[1, 2, 3, 4]).unwrap();
        assert_eq!(pa.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   pb.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn padding_never_reaches_real_tokens() {
    let cfg = backbone(2);
    let ps = init(&cfg, 9);
    let keep = [true, true, true, false, false];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = encode(&ps, &cfg, &[1, 5, 3, 0, 0], &keep);
    for _ in 0..10 {
        let pads = [rng.gen_range(0..11), rng.gen_range(0..11)];
        let other = encode(&ps, &cfg, &[1, 5, 3, pads[0], pads[1]], &keep);
        for i in 0..3 {
            for (x, y) in base.row(i).iter().zip(other.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let cfg = backbone(1);
    let ps = init(&cfg, 10);
    let tokens = [2, 7, 4, 10];
    let rep = check_params(&ps, DEFAULT_STEP, 1e-4, None, |g, pv| {
        let v = encoders::encode_backbone(g, pv, &cfg, &tokens, &[true; 4], &mut Dropout::off())?;
        // Weighted mean so the layer-norm output does not sum to a constant.
        let w = g.constant(Tensor::uniform(&[4, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let p = g.mul(v, w)?;
        Ok(g.mean(p))
    })
    .unwrap();
    assert!(rep.passed(), "{:?}", rep.worst());
}

#[test]
fn every_parameter_gets_a_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for fam in ModelFamily::ALL {
        let m: Model = Model::init(tiny_config(fam), 11).unwrap();
        let batch: Vec<(Vec<usize>, usize)> = (0..6)
            .map(|_| ((0..6).map(|_| rng.gen_range(0..11)).collect(), rng.gen_range(0..3)))
            .collect();
        let refs: Vec<(&[usize], usize)> = batch.iter().map(|(t, l)| (t.as_slice(), *l)).collect();
        let mut g = Graph::new();
        let pv = m.params.bind(&mut g);
        let loss = m.batch_loss(&mut g, &pv, &refs, &mut Dropout::off()).unwrap();
        g.backward(loss).unwrap();
        for (name, grad) in pv.grads(&g).iter() {
            assert!(grad.data().iter().any(|&x| x != 0.0), "{fam}: {name} has zero gradient");
        }
    }
}

#[test]
fn overlong_sequence_is_a_length_error() {
    let cfg = backbone(1);
    let ps = init(&cfg, 12);
    let mut g = Graph::new();
    let pv = ps.bind_frozen(&mut g);
    let toks = vec![1; 9];
    let err = encoders::encode_backbone(&mut g, &pv, &cfg, &toks, &[true; 9], &mut Dropout::off()).unwrap_err();
    assert!(matches!(err, tpr_core::Error::Length { len: 9, max: 8 }));
}
