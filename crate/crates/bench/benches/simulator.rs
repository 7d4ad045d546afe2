use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};

use twogear::bench::templates::{self, JitterConfig};
use twogear::bench::{calibrate, overhead};
use twogear::guests::ProfileKind;
use twogear::{trace_hash, CostModel, RtProfile};
use twogear_bench::simulate;

fn scenarios(c: &mut Criterion) {
    let mut g = c.benchmark_group("scenario");
    g.sample_size(10);

    let io = templates::overhead(ProfileKind::IoBound, 100_000_000);
    let records = simulate(&io).len() as u64;
    g.throughput(Throughput::Elements(records));
    g.bench_function("overhead_io_100ms", |b| b.iter(|| simulate(black_box(&io))));

    let micro = templates::micro(100);
    g.throughput(Throughput::Elements(simulate(&micro).len() as u64));
    g.bench_function("micro_100_rounds", |b| b.iter(|| simulate(black_box(&micro))));

    let mut rt = templates::default_rt(RtProfile::Xenomai);
    rt.samples = 500;
    for cfg in [JitterConfig::GearvRtVmPassthrough, JitterConfig::KvmLikeRtVm] {
        let s = templates::jitter(cfg, rt, 1);
        g.throughput(Throughput::Elements(simulate(&s).len() as u64));
        g.bench_function(format!("jitter_{}", cfg.name()), |b| b.iter(|| simulate(black_box(&s))));
    }
    g.finish();
}

fn analysis(c: &mut Criterion) {
    let io = templates::overhead(ProfileKind::IoBound, 100_000_000);
    let trace = simulate(&io);
    let cost = CostModel::default();
    c.bench_function("overhead_from_trace", |b| {
        b.iter(|| overhead::overhead_from_trace(black_box(&trace), 1, io.duration_ns, &cost))
    });
    c.bench_function("trace_hash", |b| b.iter(|| trace_hash(black_box(&trace))));
    c.bench_function("fit_composites", |b| b.iter(|| calibrate::fit_composites(black_box(&cost), &Default::default())));
}

criterion_group!(benches, scenarios, analysis);
criterion_main!(benches);
