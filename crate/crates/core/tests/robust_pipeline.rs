mod common;

use common::instances::instance;
use mabf_core::baselines::{exhaustive_search, ENUMERATION_BUDGET};
use mabf_core::bnb::BnbParams;
use mabf_core::conic::SolverSettings;
use mabf_core::model::{feasible_placements, worst_case_margin, InstanceData};
use mabf_core::perfect::{solve_fixed_b, NodeFixings};
use mabf_core::robust::{
    bnb_optimize_robust, build_robust_relaxation_with, design_worst_margin, slemma_slack, solve_robust_fixed_b,
    RobustRelaxOutcome, RobustRelaxationOptions,
};
use nalgebra::DMatrix;
use num_complex::Complex64;

fn placements(inst: &InstanceData, count: usize) -> Vec<Vec<usize>> {
    let all = feasible_placements(inst, ENUMERATION_BUDGET).unwrap();
    let stride = (all.len() / count).max(1);
    all.into_iter().step_by(stride).take(count).collect()
}

#[test]
fn lmi_solutions_are_robustly_feasible() {
    let mut solved = 0;
    for seed in 1..=4 {
        let inst = instance(seed, 2, 2, 3, 10.0, 5.0, 0.1);
        for p in placements(&inst, 3) {
            let Some(d) = solve_robust_fixed_b(&inst, &p).unwrap() else { continue };
            solved += 1;
            assert!(design_worst_margin(&inst, &d) >= -1e-6, "seed {seed} {p:?}");
            if !d.is_lifted() {
                for k in 0..2 {
                    assert!(slemma_slack(&inst, &p, &d.w, k).unwrap() >= -1e-6);
                }
            }
        }
    }
    assert!(solved >= 4);
}

#[test]
fn robust_margin_implies_lmi_feasibility() {
    let inst = instance(2, 2, 2, 3, 10.0, 3.0, 0.05);
    let mut checked = 0;
    for p in placements(&inst, 6) {
        let Some(d) = solve_fixed_b(&inst, &p).unwrap() else { continue };
        // scale a nominal design until the exact worst case clears 1e-4
        let mut w = d.w.clone();
        for _ in 0..60 {
            if (0..2).all(|k| worst_case_margin(&inst, &p, &w, k) >= 1e-4) {
                break;
            }
            w *= Complex64::new(1.25, 0.0);
        }
        if !(0..2).all(|k| worst_case_margin(&inst, &p, &w, k) >= 1e-4) {
            continue;
        }
        checked += 1;
        for k in 0..2 {
            assert!(slemma_slack(&inst, &p, &w, k).unwrap() >= -1e-7, "{p:?} user {k}");
        }
    }
    assert!(checked > 0);
}

#[test]
fn zero_beamformers_are_rejected() {
    let inst = instance(1, 2, 2, 3, 10.0, 5.0, 0.1);
    let w = DMatrix::<Complex64>::zeros(2, 2);
    assert!(slemma_slack(&inst, &inst.initial_positions, &w, 0).is_err());
    assert!(worst_case_margin(&inst, &inst.initial_positions, &w, 0) < 0.0);
}

#[test]
fn power_grows_with_uncertainty() {
    for seed in 1..=3 {
        let base = instance(seed, 2, 2, 3, 10.0, 5.0, 0.0);
        for p in placements(&base, 2) {
            let mut last = 0.0f64;
            for kappa in [0.0, 0.02, 0.05, 0.1] {
                let inst = base.with_kappa(kappa);
                let power = solve_robust_fixed_b(&inst, &p).unwrap().map_or(f64::INFINITY, |d| d.avg_power);
                assert!(!last.is_finite() && !power.is_finite() || power >= last - 1e-7 * last, "seed {seed} {p:?} kappa {kappa}: {power} < {last}");
                last = power;
            }
        }
    }
}

#[test]
fn zero_uncertainty_is_the_nominal_problem() {
    let inst = instance(3, 2, 2, 3, 10.0, 5.0, 0.0);
    for p in placements(&inst, 3) {
        let a = solve_robust_fixed_b(&inst, &p).unwrap().map(|d| d.avg_power);
        let b = solve_fixed_b(&inst, &p).unwrap().map(|d| d.avg_power);
        assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
    }
    // a tiny error radius moves the robust optimum only slightly
    let tiny = inst.with_kappa(1e-4);
    let p = &placements(&inst, 1)[0];
    if let (Some(a), Some(b)) = (solve_robust_fixed_b(&tiny, p).unwrap(), solve_fixed_b(&inst, p).unwrap()) {
        assert!(a.avg_power >= b.avg_power - 1e-7 * b.avg_power);
        assert!(a.avg_power <= b.avg_power * 1.01);
    }
}

#[test]
fn lifts_are_exact_at_complete_fixings() {
    for seed in [1, 2] {
        let inst = instance(seed, 2, 2, 3, 10.0, 5.0, 0.1);
        let es = exhaustive_search(&inst, true, ENUMERATION_BUDGET).unwrap();
        if !es.is_feasible() {
            continue;
        }
        let mut fix = NodeFixings::for_instance(&inst).unwrap();
        for (m, &n) in es.placement.iter().enumerate() {
            fix = fix.child(&inst, m, n, true).unwrap();
        }
        for opts in [
            RobustRelaxationOptions { lifts: true, cuts: true, ..Default::default() },
            RobustRelaxationOptions::default(),
        ] {
            match build_robust_relaxation_with(&inst, &fix, &opts).unwrap().solve(&SolverSettings::default()) {
                RobustRelaxOutcome::Solved(r) => {
                    assert!(r.lift_residual() <= 1e-5, "seed {seed}: {}", r.lift_residual());
                    assert!((r.bound - es.avg_power).abs() <= 1e-5 * es.avg_power.max(1.0));
                }
                other => panic!("{other:?}"),
            }
        }
    }
}

#[test]
fn robust_search_matches_enumeration() {
    let inst = instance(4, 2, 2, 3, 10.0, 5.0, 0.1);
    let res = bnb_optimize_robust(&inst, &BnbParams::default()).unwrap();
    let es = exhaustive_search(&inst, true, ENUMERATION_BUDGET).unwrap();
    assert_eq!(res.design.is_feasible(), es.is_feasible());
    if es.is_feasible() {
        assert!((res.design.avg_power - es.avg_power).abs() <= 1e-4);
        assert!(design_worst_margin(&inst, &res.design) >= -1e-6);
    }
    for w in res.trace.rows.windows(2) {
        assert!(w[1].ub <= w[0].ub);
    }
}
