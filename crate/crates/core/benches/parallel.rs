use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rmldp_core::cumulant::{build_model, ModelOptions};
use rmldp_core::ensemble::{MatrixEnsemble, MatrixKind};
use rmldp_core::montecarlo::{tilted_tail, SamplerSettings, TiltedKernel};
use rmldp_core::projective::SphereDirection;
use rmldp_core::spectral::{build_grid, default_chart, SpectralProblem};

fn ensemble() -> MatrixEnsemble {
    let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.2, 0.2, 0.5]);
    let b = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 3.0]);
    MatrixEnsemble::new(MatrixKind::Positive, vec![a, b], vec![0.5, 0.5]).unwrap()
}

// workers = 1 is the sequential path, 0 the rayon pool
fn bench(c: &mut Criterion) {
    let e = ensemble();
    let grid = build_grid(2, default_chart(&e), 256).unwrap();
    let problem = SpectralProblem::new(&e, &grid).unwrap();
    let sol = problem.solve(1.0).unwrap();
    let model = build_model(&problem, &ModelOptions::default()).unwrap();
    let q = model.q(1.0);
    let k = TiltedKernel::new(&e, &sol).unwrap();
    let x = SphereDirection::new(vec![1.0, 1.0], default_chart(&e)).unwrap();

    let mut g = c.benchmark_group("tilted_tail_n100_N4000");
    g.sample_size(10);
    for workers in [1usize, 0] {
        g.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            let set = SamplerSettings { samples: 4000, seed: 3, workers: w };
            b.iter(|| tilted_tail(&k, &x, 100, q, 0.0, &set).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("cumulant_model_res256");
    g.sample_size(10);
    for workers in [1usize, 0] {
        g.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| build_model(&problem, &ModelOptions { workers: w, ..Default::default() }).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
