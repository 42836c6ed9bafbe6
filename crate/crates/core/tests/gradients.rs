//! Central finite-difference checks of every differentiable kernel and of a
//! reduced-width model.

use rand::Rng;
use rand_distr::StandardNormal;
use voxreg::volgrad::{grad_check_graph, BatchNormState, ConvSpec, GradCheckOptions, Graph, Tensor, Var};
use voxreg::voxcnn::VoxCnnConfig;
use voxreg::Result;

const SEEDS: u64 = 8;

fn randn(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

fn check(name: &str, seed: u64, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check_graph(inputs, build, &opts).unwrap();
    assert!(
        report.passed(),
        "{name} seed {seed}: {} failures of {} (max rel error {:e}, worst {:?})",
        report.failures,
        report.checked,
        report.max_rel_error,
        report.worst
    );
    assert!(report.max_rel_error < 1e-4);
}

/// Weighted sum against a fixed random tensor, so every output element
/// carries a distinct gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let target = randn(&shape, &mut voxreg::rng::stream(seed ^ 0xA5A5));
    g.mse_loss(y, &target)
}

#[test]
fn conv3d() {
    for seed in 0..SEEDS {
        let mut r = voxreg::rng::stream(seed);
        let stride = 1 + (seed % 2) as usize;
        let spec = ConvSpec::new(2, 3).with_stride(stride);
        let x = randn(&[2, 2, 4, 3, 5], &mut r);
        let w = randn(&spec.weight_shape(), &mut r);
        let b = randn(&[3], &mut r);
        check("conv3d", seed, &[x, w, b], |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], &spec)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn relu_and_maxpool() {
    for seed in 0..SEEDS {
        let x = randn(&[2, 2, 4, 4, 4], &mut voxreg::rng::stream(seed));
        check("relu", seed, std::slice::from_ref(&x), |g, v| {
            let y = g.relu(v[0]);
            project(g, y, seed)
        });
        check("maxpool3d", seed, &[x], |g, v| {
            let y = g.maxpool3d(v[0], 2)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn batchnorm_both_modes() {
    for seed in 0..SEEDS {
        let mut r = voxreg::rng::stream(seed);
        let x = randn(&[3, 2, 2, 3, 2], &mut r);
        let gamma = randn(&[2], &mut r);
        let beta = randn(&[2], &mut r);
        check(
            "batchnorm train",
            seed,
            &[x.clone(), gamma.clone(), beta.clone()],
            |g, v| {
                let mut state = BatchNormState::new(2);
                let y = g.batchnorm(v[0], v[1], v[2], &mut state, true)?;
                project(g, y, seed)
            },
        );
        let feats = randn(&[4, 3], &mut r);
        check(
            "batchnorm features",
            seed,
            &[feats, randn(&[3], &mut r), randn(&[3], &mut r)],
            |g, v| {
                let mut state = BatchNormState::new(3);
                let y = g.batchnorm(v[0], v[1], v[2], &mut state, true)?;
                project(g, y, seed)
            },
        );
        let mut state = BatchNormState::new(2);
        state.running_mean = randn(&[2], &mut r);
        state.running_var = Tensor::from_fn(&[2], |_| 0.5 + r.random::<f64>());
        check("batchnorm eval", seed, &[x, gamma, beta], |g, v| {
            let mut s = state.clone();
            let y = g.batchnorm(v[0], v[1], v[2], &mut s, false)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn dropout_with_fixed_mask() {
    for seed in 0..SEEDS {
        let x = randn(&[2, 4, 2, 2, 2], &mut voxreg::rng::stream(seed));
        check("dropout3d", seed, &[x], |g, v| {
            let y = g.dropout(v[0], 0.5, true, &mut voxreg::rng::stream(seed + 100))?;
            project(g, y, seed)
        });
    }
}

#[test]
fn dense_head_ops() {
    for seed in 0..SEEDS {
        let mut r = voxreg::rng::stream(seed);
        let x = randn(&[3, 2, 2, 2, 3], &mut r);
        let tab = randn(&[3, 2], &mut r);
        let w = randn(&[2, 4], &mut r);
        let b = randn(&[2], &mut r);
        check("head", seed, &[x, tab, w, b], |g, v| {
            let pooled = g.global_avg_pool(v[0])?;
            let joined = g.concat(pooled, v[1])?;
            let h = g.linear(joined, v[2], v[3])?;
            let flat = g.reshape(h, &[6])?;
            let (a, c) = (g.reshape(flat, &[3, 2])?, g.relu(h));
            let y = g.blend(a, c, 0.6, 0.4)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn reduced_model_end_to_end() {
    let config = VoxCnnConfig {
        input_extent: [8; 3],
        base_filters: 2,
        fc_hidden: 6,
        n_blocks: 2,
        aux_tap_block: 1,
        ..VoxCnnConfig::default()
    };
    for seed in 0..2 {
        let report = voxreg::selfcheck::model_grad_check(&config, 3, 4, seed).unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}
