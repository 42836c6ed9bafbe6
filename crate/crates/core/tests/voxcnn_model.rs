use voxreg::volgrad::{Adam, AdamConfig, Graph, Tensor};
use voxreg::voxcnn::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TrainingMeta, VoxCnnConfig, VoxCnnModel,
};
use voxreg::Scalar;

fn small(extent: usize) -> VoxCnnConfig {
    VoxCnnConfig {
        input_extent: [extent; 3],
        base_filters: 4,
        fc_hidden: 16,
        ..VoxCnnConfig::default()
    }
}

fn volumes<T: Scalar>(n: usize, extent: usize, seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut r = voxreg::rng::stream(seed);
    Tensor::from_fn(&[n, 2, extent, extent, extent], |_| {
        T::from_f64_lossy(r.random::<f64>() - 0.5)
    })
}

#[test]
fn default_ledger_on_a_32_cube() {
    let cfg = VoxCnnConfig::default();
    let ledger = cfg.shape_ledger([32; 3]).unwrap();
    let extents: Vec<[usize; 3]> = ledger.iter().map(|s| s.extent).collect();
    assert_eq!(extents, [[16; 3], [8; 3], [4; 3], [2; 3]]);
    let widths: Vec<usize> = ledger.iter().map(|s| s.channels).collect();
    assert_eq!(widths, [16, 32, 64, 128]);
    assert_eq!(cfg.filter_widths(), [16, 32, 64, 128]);
}

#[test]
fn default_parameter_count_matches_a_hand_tally() {
    // Conv layers: weights, bias, then batch-norm gamma and beta.
    let conv = |cin: usize, cout: usize| cin * cout * 27 + cout + 2 * cout;
    let blocks = conv(2, 16)
        + conv(16, 16)
        + conv(16, 32)
        + conv(32, 32)
        + conv(32, 64)
        + conv(64, 64)
        + conv(64, 128)
        + conv(128, 128);
    let fc = 128 * 1024 + 1024 + 2 * 1024;
    let head = 1024 + 1;
    let aux = 64 + 1;
    let expected = blocks + fc + head + aux;
    assert_eq!(expected, 1_015_362);
    let cfg = VoxCnnConfig::default();
    assert_eq!(cfg.parameter_count().unwrap(), expected);
    let model = VoxCnnModel::<f32>::zeroed(cfg).unwrap();
    assert_eq!(model.num_parameters(), expected);
}

fn blend_identity<T: Scalar>() {
    let cfg = small(16);
    let model = VoxCnnModel::<T>::new(cfg.clone(), &mut voxreg::rng::stream(5)).unwrap();
    let p = model.predict(&volumes::<T>(3, 16, 1), None).unwrap();
    let (wm, wa) = (T::from_f64_lossy(0.6), T::from_f64_lossy(0.4));
    for i in 0..3 {
        assert_eq!(p.combined[i], wm * p.main[i] + wa * p.aux[i]);
    }
    assert_eq!((cfg.main_weight, cfg.aux_weight), (0.6, 0.4));
}

#[test]
fn combined_output_is_the_exact_blend() {
    blend_identity::<f32>();
    blend_identity::<f64>();
}

#[test]
fn zero_aux_weight_leaves_the_aux_head_without_gradient() {
    let cfg = VoxCnnConfig {
        aux_weight: 0.0,
        main_weight: 1.0,
        ..small(16)
    };
    let mut model = VoxCnnModel::<f64>::new(cfg, &mut voxreg::rng::stream(9)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(volumes::<f64>(4, 16, 2));
    let out = model
        .forward_train(&mut g, x, None, &mut voxreg::rng::stream(3))
        .unwrap();
    let target = Tensor::from_fn(&[4], |i| i as f64);
    let loss = model.loss(&mut g, &out, &target).unwrap();
    g.backward(loss).unwrap();
    model.zero_grads();
    model.accumulate_grads(&g, &out);
    let mut seen = 0;
    let mut other_nonzero = false;
    for (name, t) in model.params() {
        let grad = t.grad().unwrap();
        if name.starts_with("aux.") {
            seen += 1;
            assert!(grad.iter().all(|&v| v == 0.0), "{name} has a non-zero gradient");
        } else if grad.iter().any(|&v| v != 0.0) {
            other_nonzero = true;
        }
    }
    assert_eq!(seen, 2);
    assert!(other_nonzero);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let cfg = small(16);
    let model = VoxCnnModel::<f32>::new(cfg, &mut voxreg::rng::stream(4)).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), model.params());
    let mut m2 = model.clone();
    for (_, p) in m2.params_mut() {
        p.zero_grad();
        p.grad_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, g)| *g = (i % 7) as f32 - 3.0);
    }
    adam.step(m2.params_mut()).unwrap();
    let meta = TrainingMeta {
        seed: 77,
        epoch: 3,
        val_mse: Some(0.1 + 0.2),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.voxr");
    save_checkpoint(&path, &m2, Some(&adam), &meta).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.meta, meta);
    assert_eq!(back.optimizer.as_ref(), Some(&adam));
    assert_eq!(
        std::fs::read(&path).unwrap(),
        encode_checkpoint(&back.model, back.optimizer.as_ref(), &back.meta)
    );
    let x = volumes::<f32>(2, 16, 8);
    let want = m2.predict(&x, None).unwrap();
    let got = back.model.predict(&x, None).unwrap();
    assert_eq!(
        got.combined.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        want.combined.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn damaged_checkpoints_report_an_offset() {
    let model = VoxCnnModel::<f32>::new(small(16), &mut voxreg::rng::stream(1)).unwrap();
    let bytes = encode_checkpoint(&model, None, &TrainingMeta::default());
    let p = std::path::Path::new("m.voxr");
    for cut in [0, 3, 8, 40, bytes.len() / 2, bytes.len() - 1] {
        match decode_checkpoint::<f32>(&bytes[..cut], p) {
            Err(voxreg::Error::Checkpoint { .. }) => {}
            other => panic!("cut at {cut}: {:?}", other.map(|_| ())),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint::<f32>(&bad, p),
        Err(voxreg::Error::Checkpoint { offset: 0, .. })
    ));
    assert!(matches!(
        decode_checkpoint::<f64>(&bytes, p),
        Err(voxreg::Error::Checkpoint { .. })
    ));
}
