//! Confidence-weighted pose-graph refinement.
//!
//! Minimizes `sum_e cR * H(e_R) + cT * H(e_T)` over all node poses except a
//! fixed gauge node, where `H` is the Huber loss. Rotations are updated by
//! right-multiplied axis-angle increments, translations additively; the
//! solver is L-BFGS with Armijo backtracking in those tangent coordinates.

use crate::error::{Error, Result};
use crate::geom::{Pose, UnitQuaternion, Vec3};
use crate::posegraph::{format_edge, parse_edge, FrameId, PoseEdge};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

/// Rotation error fed to the Huber loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationResidual {
    /// Geodesic angle in radians.
    #[default]
    Geodesic,
    /// Frobenius distance between rotation matrices, `2 sqrt(2) sin(theta / 2)`.
    Chordal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub delta_rot: f64,
    pub delta_trans: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rotation_residual: RotationResidual,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            delta_rot: 0.05,
            delta_trans: 0.1,
            max_iters: 100,
            grad_tol: 1e-8,
            rotation_residual: RotationResidual::Geodesic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementProblem {
    pub nodes: BTreeMap<FrameId, Pose>,
    pub edges: Vec<PoseEdge>,
    pub fixed: FrameId,
    pub delta_rot: f64,
    pub delta_trans: f64,
    pub rotation_residual: RotationResidual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub poses: BTreeMap<FrameId, Pose>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// `(e_R, e_T)`: geodesic angle between the induced and predicted relative
/// rotations, and the translation discrepancy in `i`'s frame.
pub fn edge_residuals(pose_i: &Pose, pose_j: &Pose, edge: &PoseEdge) -> (f64, f64) {
    let rel = pose_i.relative(pose_j);
    (
        rel.rotation.geodesic_rad(&edge.rel_rotation),
        (rel.translation - edge.rel_translation).norm(),
    )
}

impl RefinementProblem {
    pub fn new(
        nodes: BTreeMap<FrameId, Pose>,
        edges: Vec<PoseEdge>,
        fixed: FrameId,
        config: &RefineConfig,
    ) -> Result<Self> {
        let p = Self {
            nodes,
            edges,
            fixed,
            delta_rot: config.delta_rot,
            delta_trans: config.delta_trans,
            rotation_residual: config.rotation_residual,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_rot > 0.0 && self.delta_trans > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "huber thresholds must be positive, got {} and {}",
                self.delta_rot, self.delta_trans
            )));
        }
        if !self.nodes.contains_key(&self.fixed) {
            return Err(Error::InvalidProblem(format!(
                "fixed frame {} has no pose",
                self.fixed
            )));
        }
        for e in &self.edges {
            for id in [e.src, e.dst] {
                if !self.nodes.contains_key(&id) {
                    return Err(Error::InvalidProblem(format!(
                        "edge {}->{} references frame {id} without a pose",
                        e.src, e.dst
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ids of the optimized nodes, in tangent-vector order.
    pub fn free_nodes(&self) -> Vec<FrameId> {
        self.nodes.keys().copied().filter(|&id| id != self.fixed).collect()
    }

    pub fn objective(&self, poses: &BTreeMap<FrameId, Pose>) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let (er, et) = edge_residuals(&poses[&e.src], &poses[&e.dst], e);
                let er = match self.rotation_residual {
                    RotationResidual::Geodesic => er,
                    RotationResidual::Chordal => chordal(er),
                };
                e.conf_rot * huber(er, self.delta_rot) + e.conf_trans * huber(et, self.delta_trans)
            })
            .sum()
    }

    /// Objective and its gradient with respect to the tangent increments of
    /// the free nodes, six entries per node: rotation then translation.
    pub fn objective_gradient(&self, poses: &BTreeMap<FrameId, Pose>) -> (f64, Vec<f64>) {
        let index: BTreeMap<FrameId, usize> = self
            .free_nodes()
            .into_iter()
            .enumerate()
            .map(|(k, id)| (id, 6 * k))
            .collect();
        let mut grad = vec![0.0; 6 * index.len()];
        let mut add = |id: FrameId, offset: usize, v: Vec3| {
            if let Some(&base) = index.get(&id) {
                for (g, x) in grad[base + offset..base + offset + 3].iter_mut().zip(v.iter()) {
                    *g += x;
                }
            }
        };

        let mut total = 0.0;
        for e in &self.edges {
            let (pi, pj) = (&poses[&e.src], &poses[&e.dst]);

            // Rotation: E = q_hat^-1 q_i^-1 q_j, phi = Log(E).
            let err = e
                .rel_rotation
                .inverse()
                .multiply(&pi.rotation.inverse().multiply(&pj.rotation));
            let phi = err.to_rotation_vector();
            let theta = phi.norm();
            let (er, coeff) = self.rotation_term(theta);
            total += e.conf_rot * huber(er, self.delta_rot);
            let g_phi = phi * (e.conf_rot * coeff);
            add(e.dst, 0, g_phi);
            add(e.src, 0, -e.rel_rotation.rotate(&g_phi));

            // Translation: r = R_i^T (t_j - t_i) - t_hat.
            let v = pi.rotation.inverse().rotate(&(pj.translation - pi.translation));
            let r = v - e.rel_translation;
            let et = r.norm();
            total += e.conf_trans * huber(et, self.delta_trans);
            let w = if et <= self.delta_trans {
                1.0
            } else {
                self.delta_trans / et
            };
            let g_r = r * (e.conf_trans * w);
            let g_t = pi.rotation.rotate(&g_r);
            add(e.dst, 3, g_t);
            add(e.src, 3, -g_t);
            add(e.src, 0, g_r.cross(&v));
        }
        (total, grad)
    }

    /// Rotation error and `H'(e) * de/dtheta / theta` for angle `theta`.
    fn rotation_term(&self, theta: f64) -> (f64, f64) {
        let d = self.delta_rot;
        match self.rotation_residual {
            RotationResidual::Geodesic => {
                let coeff = if theta <= d { 1.0 } else { d / theta };
                (theta, coeff)
            }
            RotationResidual::Chordal => {
                let e = chordal(theta);
                let de = std::f64::consts::SQRT_2 * (0.5 * theta).cos();
                let coeff = if e <= d {
                    if theta < 1e-12 {
                        2.0
                    } else {
                        e * de / theta
                    }
                } else {
                    d * de / theta
                };
                (e, coeff)
            }
        }
    }

    /// Applies tangent increments `x` to the free nodes.
    pub fn retract(&self, poses: &BTreeMap<FrameId, Pose>, x: &[f64]) -> BTreeMap<FrameId, Pose> {
        let mut out = poses.clone();
        for (k, id) in self.free_nodes().into_iter().enumerate() {
            let d = &x[6 * k..6 * k + 6];
            let p = out.get_mut(&id).expect("free node has a pose");
            p.rotation = p
                .rotation
                .multiply(&UnitQuaternion::from_rotation_vector(&Vec3::new(d[0], d[1], d[2])));
            p.translation += Vec3::new(d[3], d[4], d[5]);
        }
        out
    }

    /// Writes the problem as `NODES`, `EDGES`, `FIXED` and `HUBER` sections.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "NODES")?;
        for (id, p) in &self.nodes {
            let [qw, qx, qy, qz] = p.rotation.coords();
            let t = p.translation;
            writeln!(w, "{id} {qw} {qx} {qy} {qz} {} {} {}", t.x, t.y, t.z)?;
        }
        writeln!(w, "EDGES")?;
        for e in &self.edges {
            writeln!(w, "{}", format_edge(e))?;
        }
        writeln!(w, "FIXED {}", self.fixed)?;
        let kind = match self.rotation_residual {
            RotationResidual::Geodesic => "geodesic",
            RotationResidual::Chordal => "chordal",
        };
        writeln!(w, "HUBER {} {} {kind}", self.delta_rot, self.delta_trans)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Nodes,
            Edges,
        }
        let mut section = Section::None;
        let mut nodes = BTreeMap::new();
        let mut edges = Vec::new();
        let mut fixed = None;
        let mut huber = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t.split_whitespace().collect();
            match fields[0] {
                "NODES" => section = Section::Nodes,
                "EDGES" => section = Section::Edges,
                "FIXED" => {
                    let id = fields
                        .get(1)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(n, "FIXED needs a frame id"))?;
                    fixed = Some(FrameId(id));
                }
                "HUBER" => {
                    let num = |k: usize| {
                        fields
                            .get(k)
                            .and_then(|s| s.parse::<f64>().ok())
                            .ok_or_else(|| Error::parse(n, "HUBER needs two numbers"))
                    };
                    let kind = match fields.get(3).copied() {
                        None | Some("geodesic") => RotationResidual::Geodesic,
                        Some("chordal") => RotationResidual::Chordal,
                        Some(other) => {
                            return Err(Error::parse(n, format!("unknown residual {other:?}")))
                        }
                    };
                    huber = Some((num(1)?, num(2)?, kind));
                }
                _ if section == Section::Nodes => {
                    let (id, pose) = parse_node(&fields, n)?;
                    nodes.insert(id, pose);
                }
                _ if section == Section::Edges => edges.push(parse_edge(t, n)?),
                _ => return Err(Error::parse(n, "line outside of any section")),
            }
        }
        let fixed = fixed.ok_or_else(|| Error::InvalidProblem("missing FIXED".into()))?;
        let (delta_rot, delta_trans, rotation_residual) =
            huber.ok_or_else(|| Error::InvalidProblem("missing HUBER".into()))?;
        let p = Self {
            nodes,
            edges,
            fixed,
            delta_rot,
            delta_trans,
            rotation_residual,
        };
        p.validate()?;
        Ok(p)
    }
}

fn chordal(theta: f64) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * (0.5 * theta).sin()
}

fn parse_node(fields: &[&str], n: usize) -> Result<(FrameId, Pose)> {
    if fields.len() != 8 {
        return Err(Error::parse(n, format!("expected 8 node fields, found {}", fields.len())));
    }
    let id = fields[0]
        .parse::<u64>()
        .map_err(|e| Error::parse(n, format!("bad frame id: {e}")))?;
    let mut v = [0.0; 7];
    for (slot, s) in v.iter_mut().zip(&fields[1..]) {
        *slot = s
            .parse()
            .map_err(|e| Error::parse(n, format!("bad number {s:?}: {e}")))?;
    }
    let q = UnitQuaternion::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(n, e.to_string()))?;
    Ok((FrameId(id), Pose::new(q, Vec3::new(v[4], v[5], v[6]))))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MEMORY: usize = 10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// L-BFGS over the free nodes. The objective never increases between
/// accepted iterates and the fixed node is returned untouched.
pub fn solve(problem: &RefinementProblem, max_iters: usize, grad_tol: f64) -> Result<RefinementResult> {
    problem.validate()?;
    let mut poses = problem.nodes.clone();
    let (mut f, mut g) = problem.objective_gradient(&poses);
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let initial = f;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
    let mut iterations = 0;
    let mut gnorm = dot(&g, &g).sqrt();

    while iterations < max_iters && gnorm >= grad_tol && !g.is_empty() {
        let mut d = two_loop(&g, &history);
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        // First steepest-descent step: move at most 0.1 in tangent norm.
        let mut step = if history.is_empty() {
            (0.1 / gnorm).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let x: Vec<f64> = d.iter().map(|v| v * step).collect();
            let trial = problem.retract(&poses, &x);
            let (ft, gt) = problem.objective_gradient(&trial);
            if !ft.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            if ft <= f + ARMIJO * step * slope {
                accepted = Some((x, trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((s, trial, ft, gt)) = accepted else {
            // No sufficient decrease along a descent direction: numerically
            // at the optimum.
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };

        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-16 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        poses = trial;
        f = ft;
        g = gt;
        gnorm = dot(&g, &g).sqrt();
        iterations += 1;
    }

    poses.insert(problem.fixed, problem.nodes[&problem.fixed]);
    Ok(RefinementResult {
        poses,
        initial_objective: initial,
        final_objective: f,
        iterations,
        converged: gnorm < grad_tol,
        grad_norm: gnorm,
    })
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Solves with the limits from `config`.
pub fn refine(problem: &RefinementProblem, config: &RefineConfig) -> Result<RefinementResult> {
    solve(problem, config.max_iters, config.grad_tol)
}
