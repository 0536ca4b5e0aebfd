mod common;

use common::{random, rng};
use ffinet::model::{decode, encode, forward, init_params, inpaint, layout, translate};
use ffinet::params::{bind, count, count_spec, Tree};
use ffinet::spectral::ffc;
use ffinet::tensor::{grad_check, Tape, Tensor};
use ffinet::{Error, FfiNet, ModelConfig};
use rand::Rng;

fn grad_config() -> ModelConfig {
    ModelConfig {
        t_in: 2,
        t_out: 2,
        channels: 1,
        height: 8,
        width: 8,
        enc_width: 4,
        hidden: 16,
        enc_depth: 2,
        trans_depth: 2,
        fourier_units: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn parameter_count_matches_hand_count() {
    let cfg = ModelConfig { enc_width: 8, ..grad_config() };
    // Encoder: 1→8 and 8→8 3×3 blocks, each conv + bias + GN affine.
    let encoder = (8 * 9 + 8 + 16) + (8 * 8 * 9 + 8 + 16);
    // One Fourier Unit at width 8: two 1×1 8→8 blocks and one 16→16 block.
    let fu8 = 2 * (64 + 8 + 16) + (256 + 16 + 32);
    // FFC over halves of 16 channels: three 3×3 8→8 convs, a FU, two GN heads.
    let ffc = 3 * (8 * 8 * 9 + 8) + fu8 + 2 * 16;
    // Inception 16→16 at Ĉ=16: reduce to 8, grouped 3×3 and 5×5, one FU,
    // fuse 24→16.
    let inception = (16 * 8 + 8 + 16) + (8 * 9 + 8 + 16) + (8 * 25 + 8 + 16) + fu8 + (24 * 16 + 16 + 32);
    let decoder = 2 * (8 * 8 * 9 + 8 + 16);
    let head = 8 + 1;
    let expect = encoder + 2 * ffc + 2 * inception + decoder + head;
    assert_eq!(expect, 9201);
    assert_eq!(count_spec(&layout(&cfg).unwrap()), expect);
    let net = FfiNet::<f32>::new(cfg).unwrap();
    assert_eq!(net.parameter_count(), expect);
    assert_eq!(count(&net.params), expect);
}

#[test]
fn encode_shapes() {
    let cfg = ModelConfig::preset("mmnist-tiny").unwrap();
    let p = init_params::<f32>(&cfg, 0).unwrap();
    let mut tape = Tape::no_grad();
    let pv = bind(&p, &mut tape);
    let x = tape.constant(Tensor::zeros(&[2, 4, 1, 32, 32]));
    assert_eq!(encode(&mut tape, &x, &pv, &cfg).unwrap().shape(), &[2, 64, 16, 16]);

    let cfg = ModelConfig::preset("human36m-tiny").unwrap();
    assert_eq!(cfg.enc_depth, 1);
    let p = init_params::<f32>(&cfg, 0).unwrap();
    let pv = bind(&p, &mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 4, 3, 32, 32]));
    assert_eq!(encode(&mut tape, &x, &pv, &cfg).unwrap().shape(), &[1, 64, 32, 32]);

    let cfg = ModelConfig { t_in: 1, t_out: 1, ..grad_config() };
    let p = init_params::<f32>(&cfg, 0).unwrap();
    let pv = bind(&p, &mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 1, 1, 8, 8]));
    let z = encode(&mut tape, &x, &pv, &cfg).unwrap();
    assert_eq!(z.shape(), &[1, 4, 4, 4]);
    assert_eq!(decode(&mut tape, &z, 1, &pv, &cfg).unwrap().shape(), &[1, 1, 1, 8, 8]);
}

#[test]
fn inpaint_composes_two_ffc_blocks() {
    let cfg = grad_config();
    let p = init_params::<f64>(&cfg, 1).unwrap();
    let s = cfg.block_settings();
    let mut tape = Tape::no_grad();
    let pv = bind(&p, &mut tape);
    let z = tape.constant(random(&[2, 8, 4, 4], 2));
    let out = inpaint(&mut tape, &z, &pv, &s).unwrap();

    let mut l = tape.constant(z.value().narrow(1, 0, 4).unwrap());
    let mut g = tape.constant(z.value().narrow(1, 4, 4).unwrap());
    for block in &pv.inpainter {
        (l, g) = ffc(&mut tape, &l, &g, block, &s).unwrap();
    }
    let expect = Tensor::concat(&[l.value(), g.value()], 1).unwrap();
    assert_eq!(out.value(), &expect);
}

#[test]
fn bypassed_inpainter_is_plain_pipeline() {
    let cfg = ModelConfig { use_inpainter: false, ..grad_config() };
    let p = init_params::<f64>(&cfg, 3).unwrap();
    let mut tape = Tape::no_grad();
    let pv = bind(&p, &mut tape);
    let x = tape.constant(random(&[2, 2, 1, 8, 8], 4));
    let out = forward(&mut tape, &x, &pv, &cfg, true).unwrap();
    let e = encode(&mut tape, &x, &pv, &cfg).unwrap();
    let t = translate(&mut tape, &e, &pv, &cfg.block_settings()).unwrap();
    let pred = decode(&mut tape, &t, cfg.t_out, &pv, &cfg).unwrap();
    assert_eq!(out.predicted.value(), pred.value());
    let rec = decode(&mut tape, &e, cfg.t_in, &pv, &cfg).unwrap();
    assert_eq!(out.recovered.unwrap().value(), rec.value());
}

#[test]
fn recovery_uses_the_shared_decoder() {
    let cfg = grad_config();
    let p = init_params::<f64>(&cfg, 5).unwrap();
    let mut tape = Tape::no_grad();
    let pv = bind(&p, &mut tape);
    let x = tape.constant(random(&[1, 2, 1, 8, 8], 6));
    let out = forward(&mut tape, &x, &pv, &cfg, true).unwrap();
    let e = encode(&mut tape, &x, &pv, &cfg).unwrap();
    let z = inpaint(&mut tape, &e, &pv, &cfg.block_settings()).unwrap();
    let rec = decode(&mut tape, &z, cfg.t_in, &pv, &cfg).unwrap();
    assert_eq!(out.recovered.unwrap().value(), rec.value());
    assert_eq!(layout(&cfg).unwrap().decoder.len(), cfg.enc_depth);
}

#[test]
fn decoder_handles_any_frame_count() {
    let cfg = ModelConfig::preset("kth-tiny").unwrap();
    let p = init_params::<f32>(&cfg, 0).unwrap();
    let mut tape = Tape::no_grad();
    let pv = bind(&p, &mut tape);
    for k in [10, 20] {
        let z = tape.constant(Tensor::zeros(&[1, k * 16, 16, 16]));
        assert_eq!(decode(&mut tape, &z, k, &pv, &cfg).unwrap().shape(), &[1, k, 1, 32, 32]);
    }
    let z = tape.constant(Tensor::zeros(&[1, 10 * 16, 16, 16]));
    assert!(matches!(decode(&mut tape, &z, 20, &pv, &cfg), Err(Error::Dimension { .. })));
}

#[test]
fn forward_shapes_and_purity() {
    for name in ["mmnist-tiny", "taxibj-tiny", "human36m-tiny", "kitti-caltech-tiny", "kth-tiny"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let net = FfiNet::<f32>::new(cfg.clone()).unwrap();
        let x = Tensor::rand_uniform(&[1, cfg.t_in, cfg.channels, cfg.height, cfg.width], 0.0, 1.0, &mut rng(1));
        let (pred, rec) = net.predict(&x).unwrap();
        assert_eq!(pred.shape(), &[1, cfg.t_out, cfg.channels, cfg.height, cfg.width], "{name}");
        assert_eq!(rec.shape(), x.shape(), "{name}");
        assert_eq!(net.predict(&x).unwrap().0, pred);
    }
    let net = FfiNet::<f32>::new(ModelConfig::preset("mmnist-tiny").unwrap()).unwrap();
    assert!(matches!(net.predict(&Tensor::zeros(&[1, 3, 1, 32, 32])), Err(Error::Dimension { .. })));
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = grad_config();
    let p = init_params::<f64>(&cfg, 7).unwrap();
    let mut point = vec![random(&[1, 2, 1, 8, 8], 8).map(|v| 0.5 + 0.5 * v)];
    point.extend(p.to_vec());
    let report = grad_check(
        |tape, v| {
            let pv = p.rebuild(&v[1..]);
            let out = forward(tape, &v[0], &pv, &cfg, false)?;
            let sq = tape.square(&out.predicted)?;
            tape.sum(&sq)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = grad_config();
    for seed in 0..3 {
        let p = init_params::<f64>(&cfg, seed).unwrap();
        let mut g = rng(100 + seed);
        let x = Tensor::from_fn(&[2, 2, 1, 8, 8], |_| g.random::<f64>());
        let y = Tensor::from_fn(&[2, 2, 1, 8, 8], |_| g.random::<f64>());
        let mut tape = Tape::new();
        let pv = bind(&p, &mut tape);
        let xv = tape.constant(x.clone());
        let out = forward(&mut tape, &xv, &pv, &cfg, true).unwrap();
        let lp = tape.mse(&out.predicted, &tape.constant(y)).unwrap();
        let lr = tape.mse(&out.recovered.unwrap(), &tape.constant(x)).unwrap();
        let loss = tape.add(&lp, &lr).unwrap();
        let grads = tape.backward(&loss).unwrap();
        pv.visit(|name, v| {
            let gr = grads.get(v).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(gr.data().iter().any(|&d| d != 0.0), "zero gradient for {name} (seed {seed})");
        });
    }
}
