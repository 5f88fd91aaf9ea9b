use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use envme::scenario;
use envme::sweep::{collision_sweep, par_range, Exec, SyntheticStream};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn collisions(c: &mut Criterion) {
    let stream = SyntheticStream {
        seed: 1,
        len: 64 << 20,
        key: (0..128u8).collect(),
        plants: vec![1 << 20, 40 << 20],
    };
    let mut g = c.benchmark_group("collision_sweep");
    g.sample_size(10);
    g.throughput(Throughput::Bytes(stream.len));
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| collision_sweep(&stream, 4 << 20, 4096, exec))
        });
    }
    g.finish();
}

fn scenario_batch(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario_batch");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                par_range(exec, 16, |seed| {
                    scenario::run_named("init-shadow", Some(seed)).unwrap().report.passed
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, collisions, scenario_batch);
criterion_main!(benches);
