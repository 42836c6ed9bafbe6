use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_distr::StandardNormal;
use voxreg::parallel::run_sequential;
use voxreg::volgrad::{BatchNormState, ConvSpec, Graph, Tensor};
use voxreg::voxcnn::{VoxCnnConfig, VoxCnnModel};

fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = voxreg::rng::stream(seed);
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

/// Benchmarks `f` once on the rayon pool and once pinned to the caller.
fn both(c: &mut Criterion, group: &str, f: impl Fn()) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("rayon", ""), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", ""), |b| b.iter(|| run_sequential(&f)));
    g.finish();
}

fn conv3d(c: &mut Criterion) {
    let spec = ConvSpec::new(16, 32);
    let x = randn(&[4, 16, 16, 16, 16], 1);
    let w = randn(&spec.weight_shape(), 2);
    let bias = randn(&[32], 3);
    both(c, "conv3d_forward", || {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        g.conv3d(xv, wv, bv, &spec).unwrap();
    });
    both(c, "conv3d_forward_backward", || {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(bias.clone()));
        let y = g.conv3d(xv, wv, bv, &spec).unwrap();
        let target = Tensor::zeros(g.value(y).shape());
        let loss = g.mse_loss(y, &target).unwrap();
        g.backward(loss).unwrap();
    });
}

fn batchnorm_and_pool(c: &mut Criterion) {
    let x = randn(&[4, 32, 16, 16, 16], 4);
    let gamma = Tensor::from_fn(&[32], |_| 1.0f32);
    let beta = Tensor::zeros(&[32]);
    both(c, "batchnorm_relu_maxpool", || {
        let mut g = Graph::new();
        let mut state = BatchNormState::new(32);
        let (xv, gv, bv) = (g.leaf(x.clone()), g.leaf(gamma.clone()), g.leaf(beta.clone()));
        let y = g.batchnorm(xv, gv, bv, &mut state, true).unwrap();
        let y = g.relu(y);
        let y = g.maxpool3d(y, 2).unwrap();
        let target = Tensor::zeros(g.value(y).shape());
        let loss = g.mse_loss(y, &target).unwrap();
        g.backward(loss).unwrap();
    });
}

fn model_step(c: &mut Criterion) {
    let config = VoxCnnConfig {
        input_extent: [16; 3],
        ..VoxCnnConfig::default()
    };
    let model = VoxCnnModel::<f32>::new(config, &mut voxreg::rng::stream(5)).unwrap();
    let x = randn(&[8, 2, 16, 16, 16], 6);
    let target = randn(&[8], 7);
    both(c, "model_train_step_16cube_batch8", || {
        let mut m = model.clone();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = m.forward_train(&mut g, xv, None, &mut voxreg::rng::stream(8)).unwrap();
        let loss = m.loss(&mut g, &out, &target).unwrap();
        g.backward(loss).unwrap();
        m.accumulate_grads(&g, &out);
    });
    both(c, "model_predict_16cube_batch8", || {
        model.predict(&x, None).unwrap();
    });
}

criterion_group!(benches, conv3d, batchnorm_and_pool, model_step);
criterion_main!(benches);
