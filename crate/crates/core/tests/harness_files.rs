use mabf_core::harness::{
    read_csv, read_json, run_experiment, verify_results, write_csv, write_json, GridSection, ScenarioConfig, Scheme,
    Sweep, SweepAxis,
};

fn scenario() -> ScenarioConfig {
    let mut c = ScenarioConfig { id: "files".into(), ..Default::default() };
    c.grid = GridSection { l: 20.0 / 60.0, d: 10.0 };
    c.system.gamma_db = 5.0;
    c.run.schemes = vec![Scheme::Bnb, Scheme::Random, Scheme::AntennaSelection];
    c.run.seeds.count = 2;
    c.run.sweep = Some(Sweep { axis: SweepAxis::GammaDb, values: vec![0.0, 5.0] });
    c.run.workers = 2;
    c
}

#[test]
fn rows_are_canonical_and_verified() {
    let f = run_experiment(&scenario()).unwrap();
    assert_eq!(f.records.len(), 2 * 2 * 3);
    let keys: Vec<_> = f.records.iter().map(|r| (r.sweep_value.unwrap() as i64, r.seed, r.scheme as u8)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for r in &f.records {
        assert!(r.error.is_none(), "{r:?}");
        if r.avg_power_w.is_some() {
            assert!(r.verified, "{r:?}");
            let p = r.avg_power_w.unwrap();
            assert!((r.avg_power_db.unwrap() - 10.0 * p.log10()).abs() < 1e-9);
        }
    }
    let rep = verify_results(&f).unwrap();
    assert!(rep.ok(), "{:?}", rep.failures);
    assert!(rep.checked > 0);
}

#[test]
fn files_are_reproducible_without_timing() {
    let dir = tempfile::tempdir().unwrap();
    let strip = |f: &mut mabf_core::harness::ResultFile| {
        f.records = f.records.iter().map(|r| r.without_timing()).collect();
        f.designs.iter_mut().flatten().for_each(|d| d.wall_s = 0.0);
    };
    let mut cfg = scenario();
    cfg.run.sweep = None;
    let mut a = run_experiment(&cfg).unwrap();
    cfg.run.workers = 1;
    let mut b = run_experiment(&cfg).unwrap();
    strip(&mut a);
    strip(&mut b);
    let (ca, cb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_csv(&a.records, &ca).unwrap();
    write_csv(&b.records, &cb).unwrap();
    assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
    assert_eq!(read_csv(&ca).unwrap(), a.records);

    let (ja, jb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_json(&a, &ja).unwrap();
    let back = read_json(&ja).unwrap();
    write_json(&back, &jb).unwrap();
    assert_eq!(std::fs::read(&ja).unwrap(), std::fs::read(&jb).unwrap());
    assert!(verify_results(&back).unwrap().ok());
}

#[test]
fn tampered_designs_fail_verification() {
    let mut cfg = scenario();
    cfg.run.sweep = None;
    cfg.run.schemes = vec![Scheme::Bnb];
    cfg.run.seeds.count = 1;
    let mut f = run_experiment(&cfg).unwrap();
    let d = f.designs[0].as_mut().expect("feasible design");
    d.w *= num_complex::Complex64::new(0.5, 0.0);
    let rep = verify_results(&f).unwrap();
    assert!(!rep.ok());
}

#[test]
fn bundled_scenarios_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            ScenarioConfig::load(&p).unwrap().validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 2);
}
