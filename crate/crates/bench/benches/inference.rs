use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxhead::inference::{candidate_scores, InferenceMethod};
use ctxhead::verify::{random_graph, random_potentials};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn exhaustive_vs_cascade(c: &mut Criterion) {
    let mut group = c.benchmark_group("candidate_scores");
    for n in [8, 12, 16, 20] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let g = random_graph(&mut rng, n, 1.0, 1);
        // mostly attractive, as trained models tend to be: QPBO labels much of it
        let mut p = random_potentials(&mut rng, &g);
        p.pairwise.iter_mut().for_each(|w| *w = w.abs() * 0.2);
        for method in [InferenceMethod::Exhaustive, InferenceMethod::Cascade] {
            group.bench_with_input(BenchmarkId::new(format!("{method:?}"), n), &n, |b, _| {
                b.iter(|| candidate_scores(&g, &p, method).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, exhaustive_vs_cascade);
criterion_main!(benches);
