use criterion::{criterion_group, criterion_main, Criterion};
use mabf_core::bnb::BnbParams;
use mabf_core::conic::SolverSettings;
use mabf_core::harness::{build_instance, substream, GridSection, ScenarioConfig};
use mabf_core::model::InstanceData;
use mabf_core::perfect::{bnb_optimize, sca_optimize, solve_fixed_b, PenaltyParams};
use mabf_core::robust::{bnb_optimize_robust, solve_robust_fixed_b};

fn instance(per_side: usize, kappa: f64) -> InstanceData {
    let mut cfg = ScenarioConfig { id: "bench".into(), ..Default::default() };
    cfg.grid = GridSection { l: (per_side - 1) as f64 * 10.0 / 60.0, d: 10.0 };
    cfg.system.gamma_db = 5.0;
    cfg.system.kappa = kappa;
    build_instance(&cfg, 1, None).expect("bench instance")
}

fn solvers(c: &mut Criterion) {
    let perfect = instance(4, 0.0);
    let robust = instance(3, 0.1);
    let mut g = c.benchmark_group("solvers");
    g.sample_size(10);
    g.bench_function("fixed_b_socp", |b| b.iter(|| solve_fixed_b(&perfect, &perfect.initial_positions).unwrap()));
    g.bench_function("fixed_b_robust_sdp", |b| {
        b.iter(|| solve_robust_fixed_b(&robust, &robust.initial_positions).unwrap())
    });
    g.bench_function("sca_4x4", |b| {
        b.iter(|| {
            let mut rng = substream("bench", &[0]);
            let init = Some(perfect.initial_positions.clone());
            sca_optimize(&perfect, init, &PenaltyParams::sca(), &SolverSettings::default(), &mut rng).unwrap()
        })
    });
    g.bench_function("bnb_4x4", |b| b.iter(|| bnb_optimize(&perfect, false, &BnbParams::default()).unwrap()));
    g.bench_function("bnb_robust_3x3", |b| b.iter(|| bnb_optimize_robust(&robust, &BnbParams::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, solvers);
criterion_main!(benches);
