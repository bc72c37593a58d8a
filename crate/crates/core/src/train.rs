//! Adam and the two fitting drivers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::geometry::{points_to_tensor, KdTree, Point3, PointSet};
use crate::losses::{
    aiap_var, alignment_objective, data_l1_var, elastic_var, smoothness_var, AlignFrame, LossWeights, NeighborGraph,
    AIAP_K,
};
use crate::motion::MotionModel;
use crate::real::Real;
use crate::synth::{GuidePair, TrajectorySet};
use crate::tensor::{Tape, Tensor, Var};

/// Regularization applied during trajectory fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegMode {
    None,
    /// Smoothness through the Charbonnier robustifier.
    HRobust,
    /// Smoothness with `Ψ(s²) = s²`.
    HHomogeneous,
    Elastic,
    Aiap,
    /// AIAP plus robust smoothness.
    AiapH,
}

impl RegMode {
    pub const ALL: [RegMode; 6] = [
        Self::None,
        Self::HRobust,
        Self::HHomogeneous,
        Self::Elastic,
        Self::Aiap,
        Self::AiapH,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::HRobust => "h",
            Self::HHomogeneous => "h-homog",
            Self::Elastic => "e",
            Self::Aiap => "a",
            Self::AiapH => "ah",
        }
    }

    pub fn needs_jacobian(self) -> bool {
        matches!(self, Self::HRobust | Self::HHomogeneous | Self::Elastic | Self::AiapH)
    }

    fn uses_aiap(self) -> bool {
        matches!(self, Self::Aiap | Self::AiapH)
    }
}

impl fmt::Display for RegMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown regularizer '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate at the last iteration as a fraction of `lr`; the rate
    /// decays geometrically in between. 1 keeps it constant.
    pub lr_end_ratio: f64,
    pub iters: usize,
    pub seed: u64,
    /// Rows drawn per iteration; `None` uses every row.
    pub batch_points: Option<usize>,
    pub reg_mode: RegMode,
    /// Weight of the smoothness or elastic term.
    pub reg_weight: f64,
    pub aiap_weight: f64,
    pub adam: AdamConfig,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_end_ratio: 1.0,
            iters: 2000,
            seed: 0,
            batch_points: None,
            reg_mode: RegMode::None,
            reg_weight: 0.1,
            aiap_weight: 1.0,
            adam: AdamConfig::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.iters < 2 {
            return self.lr;
        }
        self.lr * self.lr_end_ratio.powf(it as f64 / (self.iters - 1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_end_ratio > 0.0 && self.lr_end_ratio <= 1.0) {
            return Err(contract(format!("lr_end_ratio must lie in (0, 1], got {}", self.lr_end_ratio)));
        }
        if self.iters == 0 {
            return Err(contract("need at least one iteration"));
        }
        if self.batch_points == Some(0) {
            return Err(contract("batch must hold at least one point"));
        }
        if !(self.reg_weight >= 0.0 && self.aiap_weight >= 0.0) {
            return Err(contract("regularizer weights must be non-negative"));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(contract("Adam needs β1, β2 in [0, 1) and ε > 0"));
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied to each tensor.
    pub steps: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: vec![0; params.len()],
        }
    }
}

/// Bias-corrected Adam update. Tensors whose gradient is `None` are left
/// untouched, moments included.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<Tensor<T>>],
    st: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != st.m.len() {
        return Err(contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            st.m.len()
        )));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() || st.m[i].shape() != p.shape() {
            return Err(contract(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
        }
        st.steps[i] += 1;
        let k = st.steps[i] as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powi(k));
        let c2 = T::lit(1.0 - cfg.beta2.powi(k));
        let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
        let (m, v) = (st.m[i].data_mut(), st.v[i].data_mut());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss trace of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub term_names: Vec<&'static str>,
    /// Per iteration: total loss and the value of each named term.
    pub records: Vec<(f64, Vec<f64>)>,
}

impl TrainReport {
    fn new(term_names: Vec<&'static str>) -> Self {
        Self {
            term_names,
            records: Vec::new(),
        }
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.0)
    }

    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,total");
        for n in &self.term_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, (total, terms)) in self.records.iter().enumerate() {
            out.push_str(&format!("{i},{total:e}"));
            for t in terms {
                out.push_str(&format!(",{t:e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn add<'t, T: Real>(acc: Option<Var<'t, T>>, term: Var<'t, T>, weight: f64) -> crate::tensor::TensorResult<Var<'t, T>> {
    let term = term.scale(T::lit(weight))?;
    match acc {
        Some(a) => a.add(term),
        None => Ok(term),
    }
}

fn step_model<T: Real>(
    model: &mut MotionModel<T>,
    tape: &Tape<T>,
    vars: &[Var<'_, T>],
    st: &mut AdamState<T>,
    cfg: &TrainConfig,
    it: usize,
) -> Result<()> {
    let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|v| tape.grad(*v)).collect();
    let mut params = model.params_mut();
    adam_step(&mut params, &grads, st, cfg.lr_at(it), &cfg.adam)
}

fn check_finite(iteration: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration, loss });
    }
    Ok(())
}

/// Fits `m` to the training split of `data`: L1 between warped canonical
/// points and their targets, averaged over (point, frame) rows, plus the
/// configured regularizer.
pub fn fit_trajectories<T: Real>(m: &mut MotionModel<T>, data: &TrajectorySet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    data.validate()?;
    if data.dim() != m.spatial_dim {
        return Err(contract(format!("{}D data for a {}D model", data.dim(), m.spatial_dim)));
    }
    if data.n_frames() != m.frames() {
        return Err(contract(format!("{} frames of data for a {}-frame model", data.n_frames(), m.frames())));
    }
    if cfg.reg_mode.needs_jacobian() && !m.variant.has_jacobian() {
        return Err(contract(format!("{} cannot use the {} regularizer", m.variant, cfg.reg_mode)));
    }
    let train = data.train_indices();
    if train.is_empty() {
        return Err(contract("no training points"));
    }
    let (canon, targets) = data.subset(&train);
    let (n, d, frames) = (train.len(), data.dim(), data.n_frames());
    let graph = if cfg.reg_mode.uses_aiap() {
        if d != 3 {
            return Err(contract("AIAP needs 3D points"));
        }
        Some(NeighborGraph::build(&crate::geometry::tensor_to_points(&canon), AIAP_K)?)
    } else {
        None
    };
    let canon_t: Tensor<T> = canon.cast();
    let all_rows = n * frames;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = AdamState::new(&m.params());
    let mut report = TrainReport::new(vec!["data", "reg"]);
    for it in 0..cfg.iters {
        let rows: Vec<usize> = match cfg.batch_points {
            Some(b) if b < all_rows => (0..b).map(|_| rng.gen_range(0..all_rows)).collect(),
            _ => (0..all_rows).collect(),
        };
        let mut x = Vec::with_capacity(rows.len() * d);
        let mut y = Vec::with_capacity(rows.len() * d);
        let mut times = Vec::with_capacity(rows.len());
        for &r in &rows {
            let (f, i) = (r / n, r % n);
            x.extend_from_slice(canon_t.row(i));
            let at = (f * n + i) * d;
            y.extend(targets.data()[at..at + d].iter().map(|&v| T::lit(v)));
            times.push(data.times_norm[f]);
        }
        let aiap_frame = graph.as_ref().map(|_| rng.gen_range(0..frames));

        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let xv = tape.constant(Tensor::new(&[rows.len(), d], x)?);
        let yv = tape.constant(Tensor::new(&[rows.len(), d], y)?);
        let out = bound.eval(xv, &times, cfg.reg_mode.needs_jacobian())?;
        let data_term = data_l1_var(out.y, yv)?;
        let mut reg: Option<Var<'_, T>> = None;
        match cfg.reg_mode {
            RegMode::None => {}
            RegMode::HRobust | RegMode::HHomogeneous | RegMode::AiapH => {
                let robust = cfg.reg_mode != RegMode::HHomogeneous;
                reg = Some(add(reg, smoothness_var(out.jac.as_ref().unwrap(), robust)?, cfg.reg_weight)?);
            }
            RegMode::Elastic => reg = Some(add(reg, elastic_var(out.jac.as_ref().unwrap())?, cfg.reg_weight)?),
            RegMode::Aiap => {}
        }
        if let (Some(g), Some(f)) = (&graph, aiap_frame) {
            let warped = bound.eval(tape.constant(canon_t.clone()), &vec![data.times_norm[f]; n], false)?;
            reg = Some(add(reg, aiap_var(warped.y, g)?, cfg.aiap_weight)?);
        }
        let total = match reg {
            Some(r) => data_term.add(r)?,
            None => data_term,
        };
        let (lt, ld) = (total.item().as_f64(), data_term.item().as_f64());
        check_finite(it, lt)?;
        report.records.push((lt, vec![ld, lt - ld]));
        tape.backward(total)?;
        let vars = bound.vars.clone();
        drop(bound);
        step_model(m, &tape, &vars, &mut st, cfg, it)?;
    }
    Ok(report)
}

/// Inputs to guided alignment, one entry per frame.
pub struct AlignmentData<'a> {
    /// Canonical points warped onto each scan (frame 0 geometry).
    pub source: &'a [Point3],
    pub scans: &'a [PointSet],
    pub guidance: &'a [GuidePair],
    pub times_norm: &'a [f64],
}

/// Minimizes the guided alignment objective, one randomly chosen frame
/// per iteration. With `batch_points` set, a fixed random subset of the
/// source points is used throughout.
pub fn fit_alignment<T: Real>(
    m: &mut MotionModel<T>,
    data: &AlignmentData<'_>,
    cfg: &TrainConfig,
    w: &LossWeights,
    robust: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    w.validate()?;
    let frames = data.scans.len();
    if data.guidance.len() != frames || data.times_norm.len() != frames {
        return Err(contract(format!(
            "{frames} scans, {} guidance frames, {} times",
            data.guidance.len(),
            data.times_norm.len()
        )));
    }
    if frames != m.frames() {
        return Err(contract(format!("{frames} frames for a {}-frame model", m.frames())));
    }
    if m.spatial_dim != 3 {
        return Err(contract("alignment needs a 3D model"));
    }
    if w.alpha4 > 0.0 && !m.variant.has_jacobian() {
        return Err(contract(format!("{} cannot use the smoothness term", m.variant)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source: Vec<Point3> = match cfg.batch_points {
        Some(b) if b < data.source.len() => {
            let mut idx = rand::seq::index::sample(&mut rng, data.source.len(), b).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| data.source[i]).collect()
        }
        _ => data.source.to_vec(),
    };
    let graph = NeighborGraph::build(&source, AIAP_K)?;
    let trees: Vec<KdTree> = data.scans.iter().map(|s| KdTree::build(&s.points)).collect::<Result<_>>()?;
    let scans: Vec<Tensor<T>> = data.scans.iter().map(|s| points_to_tensor(&s.points)).collect();
    let src_t: Tensor<T> = points_to_tensor(&source);
    let mut st = AdamState::new(&m.params());
    let mut report = TrainReport::new(vec!["chamfer", "guidance", "aiap", "smooth"]);
    for it in 0..cfg.iters {
        let k = rng.gen_range(0..frames);
        let tape = Tape::new();
        let bound = m.bind(&tape, true);
        let gp = &data.guidance[k];
        let frame = AlignFrame {
            source: tape.constant(src_t.clone()),
            scan: tape.constant(scans[k].clone()),
            scan_tree: &trees[k],
            guide_canonical: tape.constant(points_to_tensor(&gp.canonical)),
            guide_target: tape.constant(points_to_tensor(&gp.target)),
            graph: &graph,
            t: data.times_norm[k],
        };
        let (total, terms) = alignment_objective(&bound, &frame, w, robust)?;
        let lt = total.item().as_f64();
        check_finite(it, lt)?;
        report
            .records
            .push((lt, vec![terms.chamfer, terms.guidance, terms.aiap, terms.smooth]));
        if total.requires_grad() {
            tape.backward(total)?;
            let vars = bound.vars.clone();
            drop(bound);
            step_model(m, &tape, &vars, &mut st, cfg, it)?;
        }
    }
    Ok(report)
}
