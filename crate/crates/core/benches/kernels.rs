//! Hot kernels under the rayon pool and on a single thread.
//!
//! With the default `parallel` feature each kernel is measured twice: on the
//! global pool (`pool`) and inside a one-thread pool (`one_thread`). Building
//! with `--no-default-features` measures the plain sequential fallback
//! (`sequential`), which can be compared against a saved baseline:
//!
//!   cargo bench --bench kernels -- --save-baseline par
//!   cargo bench --bench kernels --no-default-features -- --baseline par

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqgforge::flowtime::{Advector, TimeGrid};
use sqgforge::spectral::{antidiv, bracket, lambda, random_div_free, Grid, VectorField};
use std::hint::black_box;

struct Inputs {
    v: VectorField,
    w: VectorField,
}

fn inputs(n: usize) -> Inputs {
    let grid = Grid::new(n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    Inputs {
        v: random_div_free(grid, n / 8, &mut rng),
        w: random_div_free(grid, n / 8, &mut rng),
    }
}

#[cfg(feature = "parallel")]
fn variants() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    vec![
        ("pool", None),
        (
            "one_thread",
            Some(rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ),
    ]
}

#[cfg(feature = "parallel")]
fn run<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn variants() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential", None)]
}

#[cfg(not(feature = "parallel"))]
fn run<R>(_: &Option<()>, f: impl FnOnce() -> R) -> R {
    f()
}

fn kernels(c: &mut Criterion) {
    let variants = variants();
    for n in [256usize, 512] {
        let inp = inputs(n);
        let mut g = c.benchmark_group(format!("n{n}"));
        g.sample_size(10);
        for (name, pool) in &variants {
            g.bench_with_input(BenchmarkId::new("synthesize", name), &inp, |b, i| {
                b.iter(|| run(pool, || black_box(i.v.physical())))
            });
            g.bench_with_input(BenchmarkId::new("bracket", name), &inp, |b, i| {
                b.iter(|| run(pool, || black_box(bracket(&lambda(&i.v), &i.w).unwrap())))
            });
            g.bench_with_input(BenchmarkId::new("antidiv", name), &inp, |b, i| {
                b.iter(|| run(pool, || black_box(antidiv(&i.w))))
            });
            g.bench_with_input(BenchmarkId::new("sup_norm", name), &inp, |b, i| {
                b.iter(|| run(pool, || black_box(i.w.c1_norm())))
            });
        }
        g.finish();
    }

    let grid = Grid::new(64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = random_div_free(grid, 3, &mut rng);
    let time = TimeGrid::new(0.0, 1e-3, 8).unwrap();
    let mut g = c.benchmark_group("flow");
    g.sample_size(10);
    for (name, pool) in &variants {
        g.bench_function(BenchmarkId::new("trace_4096", name), |b| {
            b.iter(|| {
                run(pool, || {
                    let adv = Advector::new(&v, time);
                    let pts: Vec<[f64; 2]> = sqgforge::par::map_collect(4096, |k| {
                        let x = [grid.coord(k % 64), grid.coord(k / 64)];
                        adv.trace(x, 0.0, 7e-3, 7)
                    });
                    black_box(pts)
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
