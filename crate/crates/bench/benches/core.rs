use capo::diffmodel::{denoise_grad, standard_normal, Arch, Denoiser, NoisedBatch, Trainable};
use capo::pairing::{pareto_front, Sense};
use capo::reward::{calibrate_column, RewardKind};
use capo::rng::{self, Stage};
use capo::NoiseSchedule;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

fn calibrate(c: &mut Criterion) {
    let mut group = c.benchmark_group("calibrate_column");
    for n in [16usize, 64, 256] {
        let mut rng = rng::stream(0, Stage::Test, n as u64);
        let scores = standard_normal(&mut rng, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| {
            b.iter(|| calibrate_column(s, RewardKind::BtLogit).unwrap())
        });
    }
    group.finish();
}

fn pareto(c: &mut Criterion) {
    let mut group = c.benchmark_group("pareto_front");
    for (n, l) in [(16usize, 2usize), (64, 4), (256, 4)] {
        let mut rng = rng::stream(1, Stage::Test, n as u64);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..l).map(|_| rng.random()).collect()).collect();
        group.bench_with_input(BenchmarkId::new(format!("L{l}"), n), &points, |b, p| {
            b.iter(|| pareto_front(p, Sense::Max))
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let schedule = NoiseSchedule::rectified_flow();
    let net = Trainable::new(Denoiser::init(Arch::toy(2, 32), schedule.clone(), 0));
    let mut rng = rng::stream(2, Stage::Test, 0);
    let mut group = c.benchmark_group("denoise_grad");
    for b in [64usize, 256] {
        let x0 = (0..b).map(|_| standard_normal(&mut rng, 2)).collect();
        let prompts = (0..b).map(|_| rng.random_range(0..32)).collect();
        let batch = NoisedBatch::draw(&schedule, x0, prompts, &mut rng, false).unwrap();
        let upstream = vec![1.0 / b as f64; b];
        group.bench_with_input(BenchmarkId::from_parameter(b), &batch, |bench, batch| {
            bench.iter(|| denoise_grad(&net, batch, &upstream).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, calibrate, pareto, gradient);
criterion_main!(benches);
