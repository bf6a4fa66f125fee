//! Best-first branch-and-bound over binary selection matrices, driven by
//! lower-bound, rounding and upper-bound oracles.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DesignSolution, DesignStatus, InstanceData, Placement};
use crate::perfect::NodeFixings;

/// A binary relaxed node is closed without branching only when its lifted
/// variables also match the products they stand for to this tolerance.
pub const LEAF_LIFT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub enum LowerBound {
    Bound {
        value: f64,
        /// N×M relaxed selection.
        b: DMatrix<f64>,
        /// Lift residuals such as `‖X − BW‖_F / (1 + ‖W‖_F)`.
        lift_residual: f64,
    },
    Infeasible,
    Failed(String),
}

/// Problem-specific bounding oracles.
pub trait BoundOracle {
    /// Relaxation over the node's subdomain; `tight` asks for stricter
    /// solver tolerances after a failure. `incumbent` is the best known
    /// objective (infinite when none); an oracle may restrict the relaxation
    /// to points that improve on it.
    fn lower(&self, fix: &NodeFixings, incumbent: f64, tight: bool) -> Result<LowerBound>;
    /// Feasible binary placement near a relaxed selection, inside the node.
    fn round(&self, b: &DMatrix<f64>, fix: &NodeFixings) -> Result<Option<Placement>>;
    /// Best design at a fixed placement, `None` when the targets are
    /// unattainable there.
    fn upper(&self, placement: &[usize]) -> Result<Option<DesignSolution>>;
}

#[derive(Clone, Debug)]
pub struct BnbParams {
    /// Absolute gap `UB − LB` that ends the search (W).
    pub tol_abs: f64,
    /// Optional relative gap `(UB − LB)/UB`.
    pub tol_rel: Option<f64>,
    pub node_budget: usize,
}

impl Default for BnbParams {
    fn default() -> Self {
        Self { tol_abs: 1e-4, tol_rel: None, node_budget: 100_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    External,
    Internal,
    Discarded,
    /// Subdomain resolved exactly (complete fixings or binary relaxation).
    Leaf,
}

#[derive(Clone, Debug)]
pub struct BnbNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub fixings: NodeFixings,
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub b_relaxed: Option<DMatrix<f64>>,
    pub b_rounded: Option<Placement>,
    pub state: NodeState,
    /// The relaxation failed twice and the bound was inherited.
    pub inherited: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lb: f64,
    pub ub: f64,
    pub open_nodes: usize,
    pub nodes: usize,
    pub selected: Option<usize>,
    pub branch: Option<(usize, usize)>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BnbTrace {
    pub rows: Vec<TraceRow>,
    /// Lift residuals recorded at leaves.
    pub leaf_residuals: Vec<f64>,
    pub failed_solves: usize,
}

impl BnbTrace {
    /// CSV with columns `iteration,lb,ub,open_nodes,wall_s`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "lb", "ub", "open_nodes", "wall_s"]).map_err(csv_err)?;
        for r in &self.rows {
            wr.write_record([
                r.iteration.to_string(),
                fmt_f(r.lb),
                fmt_f(r.ub),
                r.open_nodes.to_string(),
                fmt_f(r.wall_s),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Whether the recorded bounds are monotone and consistent up to `tol`.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].lb >= w[0].lb - tol && w[1].ub <= w[0].ub + tol)
            && self.rows.iter().all(|r| !(r.ub.is_finite() && r.lb.is_finite()) || r.ub >= r.lb - tol)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Clone, Debug)]
pub struct BnbResult {
    pub design: DesignSolution,
    pub trace: BnbTrace,
    pub nodes: Vec<BnbNode>,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// Free entry with the largest `|b_L − b_U|`, ties broken by `(m, n)`. When
/// the rounded point is missing, the most fractional entry is used instead.
pub fn branch_index(b_l: &DMatrix<f64>, b_u: Option<&DMatrix<f64>>, free: &[(usize, usize)]) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for &(m, n) in free {
        let score = match b_u {
            Some(u) => (b_l[(n, m)] - u[(n, m)]).abs(),
            None => -(b_l[(n, m)] - 0.5).abs(),
        };
        if best.is_none_or(|(_, s)| score > s) {
            best = Some(((m, n), score));
        }
    }
    best.map(|(i, _)| i)
}

/// External node with the smallest lower bound, ties by lowest id.
pub fn select_node(nodes: &[BnbNode]) -> Option<usize> {
    nodes
        .iter()
        .filter(|n| n.state == NodeState::External)
        .min_by(|a, b| a.lower_bound.total_cmp(&b.lower_bound).then(a.id.cmp(&b.id)))
        .map(|n| n.id)
}

/// Discards external nodes whose bound exceeds the incumbent.
pub fn prune(nodes: &mut [BnbNode], ub: f64) -> usize {
    let mut cnt = 0;
    for n in nodes.iter_mut() {
        if n.state == NodeState::External && n.lower_bound > ub - 1e-12 {
            n.state = NodeState::Discarded;
            cnt += 1;
        }
    }
    cnt
}

struct Search<'a, O: BoundOracle> {
    inst: &'a InstanceData,
    oracle: &'a O,
    nodes: Vec<BnbNode>,
    incumbent: Option<DesignSolution>,
    trace: BnbTrace,
}

impl<O: BoundOracle> Search<'_, O> {
    fn ub(&self) -> f64 {
        self.incumbent.as_ref().map(|d| d.avg_power).unwrap_or(f64::INFINITY)
    }

    fn offer(&mut self, placement: &[usize]) -> Result<f64> {
        let upper = match self.oracle.upper(placement) {
            Ok(u) => u,
            Err(Error::Solver(_)) => {
                self.trace.failed_solves += 1;
                None
            }
            Err(e) => return Err(e),
        };
        match upper {
            Some(d) => {
                let v = d.avg_power;
                if v < self.ub() {
                    self.incumbent = Some(d);
                }
                Ok(v)
            }
            None => Ok(f64::INFINITY),
        }
    }

    /// Bounds a fresh node and appends it; returns its id.
    fn add_node(&mut self, fix: NodeFixings, parent: Option<usize>) -> Result<usize> {
        let id = self.nodes.len();
        let (parent_lb, parent_b, depth) = match parent {
            Some(p) => (self.nodes[p].lower_bound, self.nodes[p].b_relaxed.clone(), self.nodes[p].depth + 1),
            None => (0.0, None, 0),
        };
        let mut node = BnbNode {
            id,
            parent,
            depth,
            fixings: fix,
            lower_bound: parent_lb,
            upper_bound: f64::INFINITY,
            b_relaxed: None,
            b_rounded: None,
            state: NodeState::External,
            inherited: false,
        };
        let ub = self.ub();
        let mut exact = false;
        let mut lb = self.oracle.lower(&node.fixings, ub, false)?;
        if let LowerBound::Failed(_) = lb {
            self.trace.failed_solves += 1;
            lb = self.oracle.lower(&node.fixings, ub, true)?;
        }
        match lb {
            LowerBound::Infeasible => {
                node.lower_bound = f64::INFINITY;
                node.state = NodeState::Discarded;
            }
            LowerBound::Failed(_) => {
                self.trace.failed_solves += 1;
                node.inherited = true;
                node.b_relaxed = parent_b;
            }
            LowerBound::Bound { value, b, lift_residual } => {
                // children of a restriction cannot be cheaper than the parent
                node.lower_bound = value.max(parent_lb);
                let binary = b.iter().all(|&v| v.min(1.0 - v).abs() <= 1e-6);
                exact = binary && lift_residual <= LEAF_LIFT_TOL;
                if exact || node.fixings.placement().is_some() {
                    self.trace.leaf_residuals.push(lift_residual);
                }
                node.b_relaxed = Some(b);
            }
        }
        if node.state == NodeState::External {
            if let Some(p) = node.fixings.placement() {
                node.upper_bound = self.offer(&p)?;
                node.b_rounded = Some(p);
                node.state = NodeState::Leaf;
            } else if let Some(b) = node.b_relaxed.clone() {
                if let Some(p) = self.oracle.round(&b, &node.fixings)? {
                    node.upper_bound = self.offer(&p)?;
                    node.b_rounded = Some(p);
                }
                if exact {
                    if let Some(p) = crate::perfect::threshold_placement(self.inst, &b) {
                        if node.fixings.contains(&p) {
                            if node.b_rounded.as_deref() != Some(&p[..]) {
                                node.upper_bound = node.upper_bound.min(self.offer(&p)?);
                                node.b_rounded = Some(p);
                            }
                            node.state = NodeState::Leaf;
                        }
                    }
                }
            }
        }
        self.nodes.push(node);
        Ok(id)
    }

    fn global_lb(&self) -> f64 {
        let open = self.nodes.iter().filter(|n| n.state == NodeState::External).map(|n| n.lower_bound);
        let lb = open.fold(f64::INFINITY, f64::min);
        lb.min(self.ub())
    }

    fn open(&self) -> usize {
        self.nodes.iter().filter(|n| n.state == NodeState::External).count()
    }
}

/// Runs the search. Root infeasibility yields an infeasible design; an
/// exhausted node budget yields `TolReached` with the final gap.
pub fn solve<O: BoundOracle>(inst: &InstanceData, oracle: &O, params: &BnbParams) -> Result<BnbResult> {
    let start = Instant::now();
    let mut s = Search { inst, oracle, nodes: Vec::new(), incumbent: None, trace: BnbTrace::default() };
    let root = match NodeFixings::for_instance(inst) {
        Ok(f) => Some(f),
        Err(Error::Infeasible(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(root) = root {
        s.add_node(root, None)?;
    }
    let mut lb_hist = 0.0f64;
    let mut iteration = 0;
    let mut status = DesignStatus::Optimal;
    loop {
        let ub = s.ub();
        prune(&mut s.nodes, ub);
        let lb = s.global_lb().max(lb_hist);
        lb_hist = lb;
        s.trace.rows.push(TraceRow {
            iteration,
            lb: if lb.is_finite() { lb } else { ub },
            ub,
            open_nodes: s.open(),
            nodes: s.nodes.len(),
            selected: None,
            branch: None,
            wall_s: start.elapsed().as_secs_f64(),
        });
        let gap = ub - lb;
        let rel_ok = params.tol_rel.is_some_and(|r| ub.is_finite() && gap <= r * ub.abs());
        if s.open() == 0 || gap <= params.tol_abs || rel_ok {
            break;
        }
        if s.nodes.len() + 2 > params.node_budget {
            status = DesignStatus::TolReached;
            break;
        }
        let Some(sel) = select_node(&s.nodes) else { break };
        let node = s.nodes[sel].clone();
        let free = node.fixings.free();
        let b_l = node.b_relaxed.clone().unwrap_or_else(|| DMatrix::from_element(inst.n(), inst.m(), 0.5));
        let b_u = node.b_rounded.as_ref().map(|p| crate::model::selection_matrix(p, inst.n()));
        let Some((m, n)) = branch_index(&b_l, b_u.as_ref(), &free) else {
            s.nodes[sel].state = NodeState::Leaf;
            continue;
        };
        s.nodes[sel].state = NodeState::Internal;
        iteration += 1;
        for value in [false, true] {
            match node.fixings.child(inst, m, n, value) {
                Ok(f) => {
                    s.add_node(f, Some(sel))?;
                }
                Err(Error::Infeasible(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if let Some(r) = s.trace.rows.last_mut() {
            r.selected = Some(sel);
            r.branch = Some((m, n));
        }
    }
    let ub = s.ub();
    let lb = lb_hist.min(ub);
    let mut design = match s.incumbent.take() {
        Some(d) => d,
        None => {
            let mut d = DesignSolution::infeasible(inst);
            if status == DesignStatus::TolReached {
                d.status = DesignStatus::TolReached;
            }
            d
        }
    };
    if design.is_feasible() {
        design.status = status;
        design.gap = (ub - lb).max(0.0);
    }
    design.nodes = s.nodes.len();
    design.iterations = iteration;
    design.wall_s = start.elapsed().as_secs_f64();
    Ok(BnbResult { design, trace: s.trace, nodes: s.nodes, lower_bound: lb, upper_bound: ub })
}
