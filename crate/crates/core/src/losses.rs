//! Training objectives and evaluation metrics.

use std::rc::Rc;

use crate::error::{contract, Result};
use crate::geometry::{dot, KdTree, Point3, PointSet};
use crate::motion::{BoundModel, JacEval, MotionModel};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, TensorResult, Var};

/// Weights of the guided alignment objective: Chamfer, guidance L1, AIAP
/// and smoothness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1e3,
            alpha2: 1.0,
            alpha3: 1.0,
            alpha4: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(contract(format!("{name} must be finite and non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// AIAP neighbour count.
pub const AIAP_K: usize = 5;

/// K nearest canonical neighbours per point with their rest distances.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    /// `src[e]`, `dst[e]` for edge `e`; `src` is `i` repeated `k` times.
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
    pub rest: Vec<f64>,
}

impl NeighborGraph {
    pub fn build(points: &[Point3], k: usize) -> Result<Self> {
        if k == 0 || points.len() <= k {
            return Err(contract(format!("need more than k = {k} points, got {}", points.len())));
        }
        let tree = KdTree::build(points)?;
        let mut src = Vec::with_capacity(points.len() * k);
        let mut dst = Vec::with_capacity(points.len() * k);
        let mut rest = Vec::with_capacity(points.len() * k);
        for (i, p) in points.iter().enumerate() {
            let found = tree.k_nearest(p, k + 1);
            for n in found.into_iter().filter(|n| n.index != i).take(k) {
                src.push(i);
                dst.push(n.index);
                rest.push(n.dist2.sqrt());
            }
        }
        Ok(Self {
            k,
            src: Rc::new(src),
            dst: Rc::new(dst),
            rest,
        })
    }

    pub fn edge_count(&self) -> usize {
        self.rest.len()
    }
}

// ---- plain metrics -------------------------------------------------------

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(contract(format!("shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over rows of the L1 norm of `pred − target`.
pub fn data_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape(pred, target)?;
    let w = *pred.shape().last().unwrap_or(&1);
    let rows = pred.len() / w.max(1);
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(total / rows.max(1) as f64)
}

/// End-point error: mean over frames and points of `‖(y − x) − (y_gt − x)‖₁`.
pub fn epe<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, canonical: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (frames, n, d) = match pred.shape() {
        &[f, n, d] => (f, n, d),
        s => return Err(contract(format!("expected [T,N,D] trajectories, got {s:?}"))),
    };
    if canonical.shape() != [n, d] {
        return Err(contract("canonical points do not match the trajectories"));
    }
    let c = canonical.data();
    let mut total = 0.0;
    for (i, (y, g)) in pred.data().iter().zip(gt.data()).enumerate() {
        let x = c[i % (n * d)].as_f64();
        total += ((y.as_f64() - x) - (g.as_f64() - x)).abs();
    }
    Ok(total / (frames * n).max(1) as f64)
}

/// Chamfer point distance and, when both sets carry normals, the normal
/// distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chamfer {
    pub cd: f64,
    pub cdn: Option<f64>,
}

fn check_sets(a: &PointSet, b: &PointSet, with_normals: bool) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("chamfer distance of an empty set"));
    }
    if with_normals && (a.normals.is_none() || b.normals.is_none()) {
        return Err(contract("normal distance needs normals on both sets"));
    }
    Ok(())
}

fn one_way(from: &PointSet, to: &PointSet, nn: impl Fn(&Point3) -> (usize, f64), with_normals: bool) -> (f64, f64) {
    let mut cd = 0.0;
    let mut cdn = 0.0;
    for (i, p) in from.points.iter().enumerate() {
        let (j, d2) = nn(p);
        cd += d2;
        if with_normals {
            let (na, nb) = (from.normals.as_ref().unwrap(), to.normals.as_ref().unwrap());
            cdn += 1.0 - dot(&na[i], &nb[j]).abs();
        }
    }
    let n = from.len() as f64;
    (cd / n, cdn / n)
}

/// `½·[mean_a min_b ‖p−q‖² + mean_b min_a ‖p−q‖²]`, using kd-trees.
pub fn chamfer(a: &PointSet, b: &PointSet, with_normals: bool) -> Result<Chamfer> {
    check_sets(a, b, with_normals)?;
    let (ta, tb) = (KdTree::build(&a.points)?, KdTree::build(&b.points)?);
    let near = |t: &KdTree, p: &Point3| {
        let n = t.nearest(p);
        (n.index, n.dist2)
    };
    let (cd_ab, n_ab) = one_way(a, b, |p| near(&tb, p), with_normals);
    let (cd_ba, n_ba) = one_way(b, a, |p| near(&ta, p), with_normals);
    Ok(Chamfer {
        cd: 0.5 * (cd_ab + cd_ba),
        cdn: with_normals.then(|| 0.5 * (n_ab + n_ba)),
    })
}

/// [`chamfer`] by exhaustive scan.
pub fn chamfer_exhaustive(a: &PointSet, b: &PointSet, with_normals: bool) -> Result<Chamfer> {
    check_sets(a, b, with_normals)?;
    let scan = |set: &PointSet, p: &Point3| {
        let n = crate::geometry::brute_force_nearest(&set.points, p);
        (n.index, n.dist2)
    };
    let (cd_ab, n_ab) = one_way(a, b, |p| scan(b, p), with_normals);
    let (cd_ba, n_ba) = one_way(b, a, |p| scan(a, p), with_normals);
    Ok(Chamfer {
        cd: 0.5 * (cd_ab + cd_ba),
        cdn: with_normals.then(|| 0.5 * (n_ab + n_ba)),
    })
}

/// Mean squared change of neighbour distances.
pub fn aiap(warped: &[Point3], g: &NeighborGraph) -> f64 {
    let total: f64 = (0..g.edge_count())
        .map(|e| {
            let d = crate::geometry::dist2(&warped[g.src[e]], &warped[g.dst[e]]).sqrt();
            (d - g.rest[e]).powi(2)
        })
        .sum();
    total / g.edge_count() as f64
}

/// `(STD(E), STD(V))` of a vertex trajectory: the largest temporal standard
/// deviation of any edge length, and the mean over vertices of the
/// temporal standard deviation of the per-step displacement length.
/// Both use the population standard deviation.
pub fn temporal_stats(traj: &[Vec<Point3>], edges: &[[usize; 2]]) -> Result<(f64, f64)> {
    let frames = traj.len();
    if frames < 3 {
        return Err(contract(format!("temporal statistics need ≥ 3 frames, got {frames}")));
    }
    let v = traj[0].len();
    if traj.iter().any(|f| f.len() != v) {
        return Err(contract("frames have different vertex counts"));
    }
    if edges.iter().any(|e| e[0] >= v || e[1] >= v) {
        return Err(contract("edge references a missing vertex"));
    }
    fn std(xs: impl Iterator<Item = f64> + Clone) -> f64 {
        let n = xs.clone().count() as f64;
        let mean = xs.clone().sum::<f64>() / n;
        (xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
    let std_e = edges
        .iter()
        .map(|&[a, b]| std(traj.iter().map(move |f| crate::geometry::dist2(&f[a], &f[b]).sqrt())))
        .fold(0.0, f64::max);
    let std_v = (0..v)
        .map(|i| std(traj.windows(2).map(move |w| crate::geometry::dist2(&w[1][i], &w[0][i]).sqrt())))
        .sum::<f64>()
        / v.max(1) as f64;
    Ok((std_e, std_v))
}

/// `Ψ(s²) = √(1 + s²) − 1`.
pub fn charbonnier(s2: f64) -> f64 {
    // written as s²/(√(1+s²)+1) to stay accurate for tiny s²
    s2 / ((1.0 + s2).sqrt() + 1.0)
}

// ---- tape objectives -----------------------------------------------------

pub fn data_l1_var<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> TensorResult<Var<'t, T>> {
    pred.sub(target)?.abs()?.sum(&[1])?.mean_all()
}

/// Nearest-neighbour pairing used by the differentiable Chamfer term.
#[derive(Clone, Debug, PartialEq)]
pub struct ChamferAssignment {
    /// For each predicted point, its nearest target.
    pub forward: Rc<Vec<usize>>,
    /// For each target point, its nearest predicted point.
    pub reverse: Rc<Vec<usize>>,
}

impl ChamferAssignment {
    pub fn compute(pred: &[Point3], target: &KdTree) -> Result<Self> {
        let forward = pred.iter().map(|p| target.nearest(p).index).collect();
        let pred_tree = KdTree::build(pred)?;
        let reverse = target.points().iter().map(|q| pred_tree.nearest(q).index).collect();
        Ok(Self {
            forward: Rc::new(forward),
            reverse: Rc::new(reverse),
        })
    }
}

/// Chamfer distance between predicted points `[N,3]` and constant targets
/// `[M,3]` under a fixed pairing.
pub fn chamfer_var<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    pairing: &ChamferAssignment,
) -> TensorResult<Var<'t, T>> {
    let fwd = pred
        .sub(target.gather(pairing.forward.clone())?)?
        .square()?
        .sum(&[1])?
        .mean_all()?;
    let rev = pred
        .gather(pairing.reverse.clone())?
        .sub(target)?
        .square()?
        .sum(&[1])?
        .mean_all()?;
    fwd.add(rev)?.scale(T::lit(0.5))
}

pub fn aiap_var<'t, T: Real>(warped: Var<'t, T>, g: &NeighborGraph) -> TensorResult<Var<'t, T>> {
    let tape = warped.tape();
    let rest = tape.constant(Tensor::new(&[g.edge_count()], g.rest.iter().map(|&r| T::lit(r)).collect())?);
    warped
        .gather(g.src.clone())?
        .sub(warped.gather(g.dst.clone())?)?
        .square()?
        .sum(&[1])?
        .offset(T::lit(1e-30))?
        .sqrt()?
        .sub(rest)?
        .square()?
        .mean_all()
}

/// `mean Ψ(s²)` over per-point squared gradient norms `[B]`.
pub fn smoothness_from_sq<'t, T: Real>(grad_sq: Var<'t, T>, robust: bool) -> TensorResult<Var<'t, T>> {
    if robust {
        grad_sq.offset(T::one())?.sqrt()?.offset(-T::one())?.mean_all()
    } else {
        grad_sq.mean_all()
    }
}

pub fn smoothness_var<'t, T: Real>(jac: &JacEval<'t, T>, robust: bool) -> TensorResult<Var<'t, T>> {
    smoothness_from_sq(jac.grad_sq, robust)
}

/// `mean ‖JᵀJ − I‖²_F`.
pub fn elastic_var<'t, T: Real>(jac: &JacEval<'t, T>) -> TensorResult<Var<'t, T>> {
    let cols = &jac.columns;
    let mut total: Option<Var<'t, T>> = None;
    for k in 0..cols.len() {
        for l in 0..cols.len() {
            let mut g = cols[k].mul(cols[l])?.sum(&[1])?;
            if k == l {
                g = g.offset(-T::one())?;
            }
            let term = g.square()?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
    }
    total.expect("at least one column").mean_all()
}

/// Smoothness with spatial derivatives of `A` and `u` taken by central
/// differences of the warp head at `x ± h·e_k`; the runtime reference for
/// the analytical path.
pub fn smoothness_fd_var<'t, T: Real>(
    bound: &BoundModel<'t, T>,
    x: &Tensor<T>,
    times: &[f64],
    robust: bool,
    h: f64,
) -> Result<Var<'t, T>> {
    let tape = bound.vars[0].tape();
    let dim = x.shape()[1];
    let rows = x.shape()[0];
    let inv = T::lit(0.5 / h);
    let mut total: Option<Var<'t, T>> = None;
    for k in 0..dim {
        let shifted = |sign: f64| {
            let mut xs = x.clone();
            for r in 0..rows {
                xs.data_mut()[r * dim + k] = xs.data()[r * dim + k] + T::lit(sign * h);
            }
            bound.eval(tape.constant(xs), times, false)
        };
        let (p, m) = (shifted(1.0)?, shifted(-1.0)?);
        let mut diffs = vec![p.u.sub(m.u)?];
        if let (Some(ap), Some(am)) = (&p.a_cols, &m.a_cols) {
            for (cp, cm) in ap.iter().zip(am) {
                diffs.push(cp.sub(*cm)?);
            }
        }
        for dvar in diffs {
            let s = dvar.scale(inv)?.square()?.sum(&[1])?;
            total = Some(match total {
                Some(t) => t.add(s)?,
                None => s,
            });
        }
    }
    Ok(smoothness_from_sq(total.expect("dim ≥ 1"), robust)?)
}

/// Smoothness of a model at sample points and times.
pub fn smoothness<T: Real>(m: &MotionModel<T>, samples: &Tensor<T>, times: &[f64], robust: bool) -> Result<f64> {
    let tape = Tape::new();
    let bound = m.bind(&tape, false);
    let out = bound.eval(tape.constant(samples.clone()), times, true)?;
    Ok(smoothness_var(out.jac.as_ref().unwrap(), robust)?.item().as_f64())
}

pub fn elastic<T: Real>(m: &MotionModel<T>, samples: &Tensor<T>, times: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let bound = m.bind(&tape, false);
    let out = bound.eval(tape.constant(samples.clone()), times, true)?;
    Ok(elastic_var(out.jac.as_ref().unwrap())?.item().as_f64())
}

/// One frame's inputs to the guided alignment objective.
pub struct AlignFrame<'t, 'a, T> {
    /// Canonical points whose warp is compared with the scan, `[N,3]`.
    pub source: Var<'t, T>,
    /// Target scan `[M,3]`.
    pub scan: Var<'t, T>,
    pub scan_tree: &'a KdTree,
    /// Guidance points in the canonical frame and at this frame, `[G,3]`.
    pub guide_canonical: Var<'t, T>,
    pub guide_target: Var<'t, T>,
    /// AIAP graph over `source`.
    pub graph: &'a NeighborGraph,
    pub t: f64,
}

/// Per-term values of the alignment objective (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignTerms {
    pub chamfer: f64,
    pub guidance: f64,
    pub aiap: f64,
    pub smooth: f64,
}

/// `α1·CD + α2·L1(guidance) + α3·AIAP + α4·smoothness` for one frame.
/// Terms with zero weight are not evaluated; with every weight zero the
/// result is the constant 0.
pub fn alignment_objective<'t, T: Real>(
    bound: &BoundModel<'t, T>,
    frame: &AlignFrame<'t, '_, T>,
    w: &LossWeights,
    robust: bool,
) -> Result<(Var<'t, T>, AlignTerms)> {
    w.validate()?;
    let tape = frame.source.tape();
    let mut terms = AlignTerms::default();
    let mut total: Option<Var<'t, T>> = None;
    let mut push = |v: Var<'t, T>, weight: f64| -> TensorResult<()> {
        let s = v.scale(T::lit(weight))?;
        total = Some(match total {
            Some(t) => t.add(s)?,
            None => s,
        });
        Ok(())
    };
    let need_source = w.alpha1 > 0.0 || w.alpha3 > 0.0 || w.alpha4 > 0.0;
    if need_source {
        let rows = frame.source.shape()[0];
        let out = bound.eval(frame.source, &vec![frame.t; rows], w.alpha4 > 0.0)?;
        if w.alpha1 > 0.0 {
            let pred = crate::geometry::tensor_to_points(&out.y.value());
            let pairing = ChamferAssignment::compute(&pred, frame.scan_tree)?;
            let cd = chamfer_var(out.y, frame.scan, &pairing)?;
            terms.chamfer = cd.item().as_f64();
            push(cd, w.alpha1)?;
        }
        if w.alpha3 > 0.0 {
            let a = aiap_var(out.y, frame.graph)?;
            terms.aiap = a.item().as_f64();
            push(a, w.alpha3)?;
        }
        if w.alpha4 > 0.0 {
            let s = smoothness_var(out.jac.as_ref().unwrap(), robust)?;
            terms.smooth = s.item().as_f64();
            push(s, w.alpha4)?;
        }
    }
    if w.alpha2 > 0.0 {
        let rows = frame.guide_canonical.shape()[0];
        let out = bound.eval(frame.guide_canonical, &vec![frame.t; rows], false)?;
        let g = data_l1_var(out.y, frame.guide_target)?;
        terms.guidance = g.item().as_f64();
        push(g, w.alpha2)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.scalar(T::zero()),
    };
    Ok((total, terms))
}
