//! Small conic programs with known optima.

use mabf_core::conic::{add_hermitian_psd, Affine, CAffine, ConicProgram, HermExpr, SolveStatus, SymExpr};
use num_complex::Complex64;

pub struct MicroCase {
    pub name: &'static str,
    pub program: ConicProgram,
    pub status: SolveStatus,
    pub objective: f64,
}

fn var(i: usize) -> Affine {
    Affine::var(i)
}

fn k(c: f64) -> Affine {
    Affine::constant(c)
}

fn case(name: &'static str, program: ConicProgram, objective: f64) -> MicroCase {
    MicroCase { name, program, status: SolveStatus::Optimal, objective }
}

pub fn micro_library() -> Vec<MicroCase> {
    let mut out = Vec::new();

    // min x s.t. x ≥ 1
    let mut p = ConicProgram::new();
    let x = p.add_var("x");
    p.set_objective(var(x));
    p.add_nonneg("lb", vec![var(x) - k(1.0)]);
    out.push(case("lp_bound", p, 1.0));

    // two-constraint LP with a unique vertex (8/5, 6/5)
    let mut p = ConicProgram::new();
    let x = p.add_var("x");
    let y = p.add_var("y");
    p.set_objective(-var(x) - var(y));
    p.add_nonneg(
        "rows",
        vec![
            k(4.0) - var(x) - var(y) * 2.0,
            k(6.0) - var(x) * 3.0 - var(y),
            var(x),
            var(y),
        ],
    );
    out.push(case("lp_vertex", p, -2.8));

    // simplex LP with an equality
    let mut p = ConicProgram::new();
    let v = p.add_vars("x", 3);
    p.set_objective(var(v) + var(v + 1) * 2.0 + var(v + 2) * 3.0);
    p.add_zero("sum", vec![var(v) + var(v + 1) + var(v + 2) - k(1.0)]);
    p.add_nonneg("pos", (0..3).map(|i| var(v + i)).collect());
    out.push(case("lp_simplex", p, 1.0));

    // min t s.t. ‖(3,4)‖ ≤ t
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    p.set_objective(var(t));
    p.add_soc("soc", var(t), vec![k(3.0), k(4.0)]);
    out.push(case("soc_norm", p, 5.0));

    // distance from (1,2,3) to the plane Σx = 0
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    let v = p.add_vars("x", 3);
    p.set_objective(var(t));
    p.add_zero("plane", vec![var(v) + var(v + 1) + var(v + 2)]);
    p.add_soc("dist", var(t), (0..3).map(|i| var(v + i) - k((i + 1) as f64)).collect());
    out.push(case("soc_projection", p, 2.0 * 3f64.sqrt()));

    // min x + y over the unit disc
    let mut p = ConicProgram::new();
    let x = p.add_var("x");
    let y = p.add_var("y");
    p.set_objective(var(x) + var(y));
    p.add_soc("disc", k(1.0), vec![var(x), var(y)]);
    out.push(case("soc_disc", p, -2f64.sqrt()));

    // min t s.t. ‖x‖² ≤ t, x1 + x2 = 2  (rotated cone)
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    let v = p.add_vars("x", 2);
    p.set_objective(var(t));
    p.add_zero("sum", vec![var(v) + var(v + 1) - k(2.0)]);
    p.add_rotated_soc("rsoc", var(t) * 0.5, k(1.0), vec![var(v), var(v + 1)]);
    out.push(case("rsoc_quadratic", p, 2.0));

    // min t s.t. [[t,1],[1,t]] ⪰ 0
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    p.set_objective(var(t));
    let mut s = SymExpr::zeros(2);
    s.set(0, 0, var(t));
    s.set(1, 1, var(t));
    s.set(1, 0, k(1.0));
    p.add_psd("lmi", s);
    out.push(case("psd_2x2", p, 1.0));

    // largest eigenvalue of [[2,1],[1,2]]
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    p.set_objective(var(t));
    let mut s = SymExpr::zeros(2);
    s.set(0, 0, var(t) - k(2.0));
    s.set(1, 1, var(t) - k(2.0));
    s.set(1, 0, k(-1.0));
    p.add_psd("lmi", s);
    out.push(case("psd_lambda_max", p, 3.0));

    // min tr(CX) s.t. tr X = 1, X ⪰ 0 → λ_min(C) for tridiagonal C
    let mut p = ConicProgram::new();
    let n = 3;
    let c = [[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]];
    let mut s = SymExpr::zeros(n);
    let mut obj = Affine::zero();
    let mut tr = Affine::zero();
    for j in 0..n {
        for i in j..n {
            let v = p.add_var(format!("X{i}{j}"));
            s.set(i, j, var(v));
            let w = if i == j { c[i][j] } else { 2.0 * c[i][j] };
            obj.add_term(v, w);
            if i == j {
                tr.add_term(v, 1.0);
            }
        }
    }
    p.set_objective(obj);
    p.add_zero("trace", vec![tr - k(1.0)]);
    p.add_psd("X", s);
    out.push(case("psd_lambda_min", p, 2.0 - 2f64.sqrt()));

    // Hermitian: min t s.t. tI − [[1, j],[−j, 1]] ⪰ 0 → 2
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    p.set_objective(var(t));
    let mut h = HermExpr::zeros(2);
    h.set(0, 0, CAffine::real(var(t) - k(1.0)));
    h.set(1, 1, CAffine::real(var(t) - k(1.0)));
    h.set(0, 1, CAffine::constant(Complex64::new(0.0, -1.0)));
    add_hermitian_psd(&mut p, "herm", &h).unwrap();
    out.push(case("hermitian_lambda_max", p, 2.0));

    // distance from (2,1) to the half-plane x + y ≤ 1
    let mut p = ConicProgram::new();
    let t = p.add_var("t");
    let x = p.add_var("x");
    let y = p.add_var("y");
    p.set_objective(var(t));
    p.add_nonneg("half", vec![k(1.0) - var(x) - var(y)]);
    p.add_soc("dist", var(t), vec![var(x) - k(2.0), var(y) - k(1.0)]);
    out.push(case("lp_soc_mixed", p, 2f64.sqrt()));

    // max-cut style SDP: min tr(CX), diag X = 1, C = [[0,1],[1,0]] → −2
    let mut p = ConicProgram::new();
    let x00 = p.add_var("x00");
    let x10 = p.add_var("x10");
    let x11 = p.add_var("x11");
    p.set_objective(var(x10) * 2.0);
    p.add_zero("diag", vec![var(x00) - k(1.0), var(x11) - k(1.0)]);
    let mut s = SymExpr::zeros(2);
    s.set(0, 0, var(x00));
    s.set(1, 0, var(x10));
    s.set(1, 1, var(x11));
    p.add_psd("X", s);
    out.push(case("sdp_maxcut", p, -2.0));

    // infeasible: x ≥ 1 and x ≤ 0
    let mut p = ConicProgram::new();
    let x = p.add_var("x");
    p.set_objective(var(x));
    p.add_nonneg("rows", vec![var(x) - k(1.0), -var(x)]);
    out.push(MicroCase { name: "lp_infeasible", program: p, status: SolveStatus::PrimalInfeasible, objective: f64::NAN });

    // unbounded: min x s.t. x ≤ 0
    let mut p = ConicProgram::new();
    let x = p.add_var("x");
    let y = p.add_var("y");
    p.set_objective(var(x));
    p.add_nonneg("rows", vec![-var(x), var(y)]);
    out.push(MicroCase { name: "lp_unbounded", program: p, status: SolveStatus::DualInfeasible, objective: f64::NAN });

    out
}
