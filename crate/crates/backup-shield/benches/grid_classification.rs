use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use backup_shield::sets::{compute_margin_grids, compute_margin_grids_seq, GridSpec};
use backup_shield::PendulumParams;

fn bench_grid(c: &mut Criterion) {
    let params = PendulumParams::default();
    let mut group = c.benchmark_group("grid_classification");
    group.sample_size(10);
    for n in [51usize, 101] {
        let spec = GridSpec::new((-2.2, 2.2), (-1.5, 1.5), n, n).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", n), &spec, |b, spec| {
            b.iter(|| compute_margin_grids(&params, spec))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &spec, |b, spec| {
            b.iter(|| compute_margin_grids_seq(&params, spec))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_grid);
criterion_main!(benches);
