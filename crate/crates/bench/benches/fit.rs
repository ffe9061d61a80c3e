use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgnd_core::model::{Problem, ThetaVector};
use sgnd_core::sgnd::norm_const;
use sgnd_core::simulation::replicate_data;
use sgnd_core::{read_csv, standardize, telescope_fit, FitConfig, PenaltySpec, SgndSampler, SgndShape, SimScenario};

fn density(c: &mut Criterion) {
    c.bench_function("norm_const kappa=1.52", |b| {
        let shape = SgndShape::new(1.52, 0.15, 0.2).unwrap();
        b.iter(|| norm_const(black_box(&shape)).unwrap())
    });
    c.bench_function("sample 10k kappa=1", |b| {
        let sampler = SgndSampler::new(SgndShape::new(1.0, 0.15, 0.2).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter(|| sampler.sample(&mut rng, 10_000, 0.0, 1.0))
    });
}

fn derivatives(c: &mut Criterion) {
    let data = standardize(&replicate_data(&SimScenario::table1(1.33, 1000, 3), 0).unwrap()).unwrap();
    let mut theta = ThetaVector::zeros(data.p(), 0.1);
    theta.beta[1] = 1.0;
    theta.alpha[1] = 0.5;
    let prob = Problem::new(&data, PenaltySpec::new(1000f64.ln(), 0.1).unwrap(), 0.15, 0.2);
    c.bench_function("score n=1000 p=12", |b| b.iter(|| prob.score(black_box(&theta)).unwrap()));
    c.bench_function("information n=1000 p=12", |b| b.iter(|| prob.info_blocks(black_box(&theta)).unwrap()));
}

fn fits(c: &mut Criterion) {
    let mut g = c.benchmark_group("telescope_fit");
    g.sample_size(10);
    let cfg = FitConfig::default();
    let diabetes = read_csv(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/diabetes.csv"), "Y", None).unwrap();
    g.bench_function("diabetes", |b| b.iter(|| telescope_fit(black_box(&diabetes), &cfg).unwrap()));
    let sim = replicate_data(&SimScenario::table1(2.0, 500, 7), 0).unwrap();
    g.bench_function("table1 kappa=2 n=500", |b| b.iter(|| telescope_fit(black_box(&sim), &cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, density, derivatives, fits);
criterion_main!(benches);
