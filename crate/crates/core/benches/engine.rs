use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;
use swavenet::model::Noise;
use swavenet::objective::{elbo_terms, objective_loss};
use swavenet::synth::gen_bimodal_walk;
use swavenet::tape::ConvDirection;
use swavenet::{rng, Graph, ModelConfig, SWaveNet, Sequence, SequenceBatch, Tensor};

fn normal(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(seed, 0, 0, 0, n)).unwrap()
}

fn conv_step(x: &Tensor, k: &Tensor) {
    let mut g = Graph::new();
    let (xv, kv) = (g.leaf(x), g.leaf(k));
    let y = g.conv1d(xv, kv, None, 4, ConvDirection::Causal).unwrap();
    let t = g.tanh(y).unwrap();
    let s = g.sum(t).unwrap();
    g.backward(s).unwrap();
}

fn affine_step(x: &Tensor, w: &Tensor, b: &Tensor) {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.leaf(x), g.leaf(w), g.leaf(b));
    let y = g.affine(xv, wv, bv).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
}

fn train_step(m: &SWaveNet, batch: &SequenceBatch) {
    let mut g = Graph::new();
    let bind = m.params().bind(&mut g);
    let terms = elbo_terms(m, &mut g, &bind, batch, &Noise::Keyed { seed: 1 }).unwrap();
    let loss = objective_loss(&mut g, &terms, 0.5).unwrap();
    g.backward(loss).unwrap();
}

fn engine(c: &mut Criterion) {
    let single = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let x = normal(&[32, 128, 32], 1).with_grad();
    let k = normal(&[2, 32, 32], 2).with_grad();
    let w = normal(&[32, 64], 3).with_grad();
    let b = normal(&[64], 4).with_grad();
    let data = gen_bimodal_walk(32, 64, 5);
    let refs: Vec<&Sequence> = data.sequences.iter().collect();
    let batch = SequenceBatch::from_sequences(&refs, (0..32).collect()).unwrap();
    let models: Vec<(usize, SWaveNet)> = [0, 2]
        .into_iter()
        .map(|s| (s, SWaveNet::new(ModelConfig::new(4, s, 16, 16, 1)).unwrap()))
        .collect();

    for (mode, threads) in [("parallel", None), ("sequential", Some(&single))] {
        let run = |f: &mut (dyn FnMut() + Send)| match threads {
            Some(pool) => pool.install(f),
            None => f(),
        };
        let mut group = c.benchmark_group(format!("engine/{mode}"));
        group.bench_function("conv1d_32x128x32", |bench| bench.iter(|| run(&mut || conv_step(&x, &k))));
        group.bench_function("affine_4096x32x64", |bench| bench.iter(|| run(&mut || affine_step(&x, &w, &b))));
        for (s, m) in &models {
            group.bench_with_input(BenchmarkId::new("train_step_L4_H16", format!("S={s}")), m, |bench, m| {
                bench.iter(|| run(&mut || train_step(m, &batch)))
            });
        }
        group.finish();
    }
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(20).configure_from_args();
    targets = engine
);
criterion_main!(benches);
