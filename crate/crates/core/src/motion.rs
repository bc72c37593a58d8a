//! Motion models: network outputs mapped to per-point affine transforms.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::baselines::{BoneCloudParams, BoundBones, BoundRelu, ReluPeParams, RELU_LAYERS, RELU_WIDTH};
use crate::geometry::Point3;
use crate::error::{contract, Error, Result};
use crate::real::Real;
use crate::siren::{init_siren, tangent_block, BoundSiren, SirenParams, OMEGA_FIRST};
use crate::tensor::{Tape, Tensor, TensorResult, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Trans,
    Se3,
    ScaledSe3,
    Affinity,
    Dpf,
    ReluPe,
    BoneCloud,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Trans,
        Variant::Se3,
        Variant::ScaledSe3,
        Variant::Affinity,
        Variant::Dpf,
        Variant::ReluPe,
        Variant::BoneCloud,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Trans => "trans",
            Variant::Se3 => "se3",
            Variant::ScaledSe3 => "scaled-se3",
            Variant::Affinity => "affinity",
            Variant::Dpf => "dpf",
            Variant::ReluPe => "relu-pe",
            Variant::BoneCloud => "bonecloud",
        }
    }

    pub fn tag(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.get(tag as usize).copied()
    }

    /// Width of the raw network output in `dim` dimensions, or `None` when
    /// the variant does not exist there.
    pub fn out_dim(self, dim: usize) -> Option<usize> {
        match (self, dim) {
            (Variant::Trans | Variant::Dpf | Variant::ReluPe, 2 | 3) => Some(dim),
            (Variant::Affinity, 2 | 3) => Some(dim * dim + dim),
            (Variant::Se3, 3) => Some(9),
            (Variant::ScaledSe3, 3) => Some(10),
            (Variant::BoneCloud, 3) => Some(12),
            _ => None,
        }
    }

    /// Whether the motion Jacobian is available.
    pub fn has_jacobian(self) -> bool {
        !matches!(self, Variant::ReluPe | Variant::BoneCloud)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| contract(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network<T> {
    Siren(SirenParams<T>),
    /// One field per non-canonical frame; frame 0 is the identity.
    PerFrame(Vec<SirenParams<T>>),
    ReluPe(ReluPeParams<T>),
    BoneCloud(BoneCloudParams<T>),
}

/// Rows evaluated per tape by the plain warp.
const WARP_CHUNK: usize = 8192;

/// A network plus the rule turning its output into `y = A(x,t)·x + u(x,t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionModel<T> {
    pub variant: Variant,
    pub spatial_dim: usize,
    /// Raw frame range mapped onto `[−1, 1]`.
    pub t_min: f64,
    pub t_max: f64,
    pub net: Network<T>,
}

/// Per-point linear part `[B,D,D]` and translation `[B,D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap<T> {
    pub a: Tensor<T>,
    pub u: Tensor<T>,
}

/// `t = −1 + 2(k − t_min)/(t_max − t_min)`.
pub fn normalize_time(k: f64, t_min: f64, t_max: f64) -> f64 {
    -1.0 + 2.0 * (k - t_min) / (t_max - t_min)
}

pub fn denormalize_time(t: f64, t_min: f64, t_max: f64) -> f64 {
    t_min + (t + 1.0) * 0.5 * (t_max - t_min)
}

/// The scalar-free description of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelMeta {
    pub variant: Variant,
    pub spatial_dim: usize,
    pub t_min: f64,
    pub t_max: f64,
}

impl ModelMeta {
    pub fn frames(&self) -> usize {
        (self.t_max - self.t_min).round() as usize + 1
    }

    pub fn frame_of_time(&self, t: f64) -> Result<usize> {
        let raw = denormalize_time(t, self.t_min, self.t_max) - self.t_min;
        let k = raw.round();
        if (raw - k).abs() > 1e-6 || k < 0.0 || k as usize >= self.frames() {
            return Err(contract(format!("time {t} does not fall on a frame")));
        }
        Ok(k as usize)
    }
}

/// Factor applied to freshly drawn output-layer weights of sine networks.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

fn near_identity<T: Real>(mut p: SirenParams<T>) -> SirenParams<T> {
    let out = p.output_layer_mut();
    out.weight = out.weight.map(|w| w * T::lit(OUTPUT_INIT_SCALE));
    p
}

impl<T: Real> MotionModel<T> {
    /// A sine-network model for `frames` frames with the default first-layer
    /// frequency.
    pub fn siren(variant: Variant, spatial_dim: usize, d: usize, n: usize, frames: usize, seed: u64) -> Result<Self> {
        let out = variant
            .out_dim(spatial_dim)
            .ok_or_else(|| contract(format!("{variant} is not available in {spatial_dim}D")))?;
        if frames < 2 {
            return Err(contract("a sequence needs at least 2 frames"));
        }
        let net = match variant {
            Variant::Trans | Variant::Se3 | Variant::ScaledSe3 | Variant::Affinity => {
                Network::Siren(near_identity(init_siren(spatial_dim + 1, d, n, out, OMEGA_FIRST, seed)?))
            }
            Variant::Dpf => Network::PerFrame(
                (1..frames)
                    .map(|k| init_siren(spatial_dim, d, n, out, OMEGA_FIRST, seed.wrapping_add(k as u64)).map(near_identity))
                    .collect::<Result<_>>()?,
            ),
            _ => return Err(contract(format!("{variant} is not a sine network"))),
        };
        Self::new(variant, spatial_dim, 0.0, (frames - 1) as f64, net)
    }

    /// ReLU displacement MLP of the default width and depth.
    pub fn relu_pe(spatial_dim: usize, pe_levels: usize, frames: usize, seed: u64) -> Result<Self> {
        if frames < 2 {
            return Err(contract("a sequence needs at least 2 frames"));
        }
        let p = ReluPeParams::init(spatial_dim + 1, pe_levels, RELU_WIDTH, RELU_LAYERS, spatial_dim, seed)?;
        Self::new(Variant::ReluPe, spatial_dim, 0.0, (frames - 1) as f64, Network::ReluPe(p))
    }

    /// Bone cloud with bones drawn in the bounding box of `points`.
    pub fn bone_cloud(points: &[Point3], bones: usize, frames: usize, sigma: f64, seed: u64) -> Result<Self> {
        let p = BoneCloudParams::init(points, bones, frames, sigma, seed)?;
        Self::new(Variant::BoneCloud, 3, 0.0, (frames - 1) as f64, Network::BoneCloud(p))
    }

    /// Validates that the network fits the variant.
    pub fn new(variant: Variant, spatial_dim: usize, t_min: f64, t_max: f64, net: Network<T>) -> Result<Self> {
        let out = variant
            .out_dim(spatial_dim)
            .ok_or_else(|| contract(format!("{variant} is not available in {spatial_dim}D")))?;
        if !(t_max > t_min) {
            return Err(contract("time range must be increasing"));
        }
        let ok = match (&net, variant) {
            (Network::Siren(p), Variant::Trans | Variant::Se3 | Variant::ScaledSe3 | Variant::Affinity) => {
                p.in_dim == spatial_dim + 1 && p.out_dim == out
            }
            (Network::PerFrame(nets), Variant::Dpf) => {
                let frames = t_max - t_min + 1.0;
                frames.fract() == 0.0
                    && nets.len() + 1 == frames as usize
                    && nets.iter().all(|p| p.in_dim == spatial_dim && p.out_dim == out)
            }
            (Network::ReluPe(p), Variant::ReluPe) => p.in_dim == spatial_dim + 1 && p.out_dim == out,
            (Network::BoneCloud(p), Variant::BoneCloud) => p.frames() as f64 == t_max - t_min + 1.0,
            _ => false,
        };
        if !ok {
            return Err(contract(format!("network shape does not fit variant {variant}")));
        }
        Ok(Self {
            variant,
            spatial_dim,
            t_min,
            t_max,
            net,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            variant: self.variant,
            spatial_dim: self.spatial_dim,
            t_min: self.t_min,
            t_max: self.t_max,
        }
    }

    pub fn frames(&self) -> usize {
        self.meta().frames()
    }

    pub fn time_of_frame(&self, k: usize) -> f64 {
        normalize_time(k as f64, self.t_min, self.t_max)
    }

    /// Frame index for a normalized time; errors unless it lands on a frame.
    pub fn frame_of_time(&self, t: f64) -> Result<usize> {
        self.meta().frame_of_time(t)
    }

    /// Every trainable tensor, in binding order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match &self.net {
            Network::Siren(p) => p.tensors(),
            Network::PerFrame(ps) => ps.iter().flat_map(|p| p.tensors()).collect(),
            Network::ReluPe(p) => p.tensors(),
            Network::BoneCloud(p) => vec![&p.transforms],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match &mut self.net {
            Network::Siren(p) => p.tensors_mut(),
            Network::PerFrame(ps) => ps.iter_mut().flat_map(|p| p.tensors_mut()).collect(),
            Network::ReluPe(p) => p.tensors_mut(),
            Network::BoneCloud(p) => vec![&mut p.transforms],
        }
    }

    /// Weight entries excluding biases; what the model-size formulas count.
    pub fn param_count(&self) -> usize {
        match &self.net {
            Network::Siren(p) => p.weight_count(),
            Network::PerFrame(ps) => ps.iter().map(|p| p.weight_count()).sum(),
            Network::ReluPe(p) => p.weight_count(),
            Network::BoneCloud(p) => p.transforms.len(),
        }
    }

    /// Every stored scalar, biases included.
    pub fn scalar_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Rounds every stored value through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            t.round_to_f32();
        }
        if let Network::BoneCloud(p) = &mut self.net {
            p.bones.round_to_f32();
            p.sigma = T::lit(p.sigma.as_f64() as f32 as f64);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundModel<'t, T> {
        let vars: Vec<Var<'t, T>> = self
            .params()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        let net = match &self.net {
            Network::Siren(p) => BoundNet::Siren(BoundSiren::from_vars(p, vars.clone())),
            Network::PerFrame(ps) => {
                let mut offset = 0;
                BoundNet::PerFrame(
                    ps.iter()
                        .map(|p| {
                            let n = 2 * p.layers.len();
                            let b = BoundSiren::from_vars(p, vars[offset..offset + n].to_vec());
                            offset += n;
                            b
                        })
                        .collect(),
                )
            }
            Network::ReluPe(p) => BoundNet::ReluPe(BoundRelu::from_vars(p, vars.clone())),
            Network::BoneCloud(p) => {
                let mut b = p.bind(tape, false);
                b.transforms = vars[0];
                BoundNet::BoneCloud(b)
            }
        };
        BoundModel {
            model: self.meta(),
            net,
            vars,
        }
    }

    fn check_points(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.spatial_dim {
            return Err(contract(format!(
                "expected points of width {}, got shape {:?}",
                self.spatial_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Warps every row of `x` to normalized time `t`.
    pub fn warp(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.warp_rows(x, &vec![t; x.shape()[0]])
    }

    /// Warps row `i` of `x` to `times[i]`.
    pub fn warp_rows(&self, x: &Tensor<T>, times: &[f64]) -> Result<Tensor<T>> {
        self.check_points(x)?;
        let (rows, d) = (x.shape()[0], self.spatial_dim);
        if times.len() != rows {
            return Err(contract(format!("{} times for {rows} points", times.len())));
        }
        let mut out = Vec::with_capacity(rows * d);
        for start in (0..rows).step_by(WARP_CHUNK) {
            let end = (start + WARP_CHUNK).min(rows);
            let chunk = Tensor::new(&[end - start, d], x.data()[start * d..end * d].to_vec())?;
            let tape = Tape::new();
            let bound = self.bind(&tape, false);
            let y = bound.eval(tape.constant(chunk), &times[start..end], false)?.y;
            out.extend_from_slice(y.value().data());
        }
        Ok(Tensor::new(&[rows, d], out)?)
    }

    /// Like [`MotionModel::warp`] on a checked tape: times outside `[−1,1]`
    /// and non-finite values are rejected.
    pub fn warp_checked(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.check_points(x)?;
        let tape = Tape::checked();
        let bound = self.bind(&tape, false);
        let out = bound.eval(tape.constant(x.clone()), &vec![t; x.shape()[0]], false)?;
        Ok((*out.y.value()).clone())
    }

    /// Per-point `A` and `u` at time `t`.
    pub fn evaluate_map(&self, x: &Tensor<T>, t: f64) -> Result<AffineMap<T>> {
        self.check_points(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.eval(tape.constant(x.clone()), &vec![t; x.shape()[0]], false)?;
        let (b, d) = (x.shape()[0], self.spatial_dim);
        let a = match &out.a_cols {
            None => stack_identity(b, d),
            Some(cols) => stack_columns(cols),
        };
        Ok(AffineMap {
            a,
            u: (*out.u.value()).clone(),
        })
    }

    /// `∂y/∂x` per point as `[B,D,D]`.
    pub fn motion_jacobian(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.check_points(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.eval(tape.constant(x.clone()), &vec![t; x.shape()[0]], true)?;
        Ok(stack_columns(&out.jac.expect("jacobian requested").columns))
    }
}

fn stack_identity<T: Real>(b: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[b, d, d], |i| {
        let r = i % (d * d);
        if r / d == r % d {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `[B,D,D]` whose column `k` is `cols[k]`.
fn stack_columns<T: Real>(cols: &[Var<'_, T>]) -> Tensor<T> {
    let d = cols.len();
    let vals: Vec<_> = cols.iter().map(|c| c.value()).collect();
    let b = vals[0].shape()[0];
    Tensor::from_fn(&[b, d, d], |i| {
        let (row, rest) = (i / (d * d), i % (d * d));
        let (r, k) = (rest / d, rest % d);
        vals[k].data()[row * d + r]
    })
}

enum BoundNet<'t, T> {
    Siren(BoundSiren<'t, T>),
    PerFrame(Vec<BoundSiren<'t, T>>),
    ReluPe(BoundRelu<'t, T>),
    BoneCloud(BoundBones<'t, T>),
}

/// A [`MotionModel`] recorded on a tape.
pub struct BoundModel<'t, T> {
    pub model: ModelMeta,
    net: BoundNet<'t, T>,
    /// Parameter leaves in the order of [`MotionModel::params`].
    pub vars: Vec<Var<'t, T>>,
}

/// Spatial derivatives of a warp.
pub struct JacEval<'t, T> {
    /// `columns[k]` is `∂y/∂x_k`, `[B,D]`.
    pub columns: Vec<Var<'t, T>>,
    /// `‖∇A‖²_F + ‖∇u‖²_F` per point, `[B]`.
    pub grad_sq: Var<'t, T>,
}

pub struct FieldEval<'t, T> {
    /// Warped points `[B,D]`.
    pub y: Var<'t, T>,
    /// Columns of `A`, each `[B,D]`; `None` when `A = I`.
    pub a_cols: Option<Vec<Var<'t, T>>>,
    pub u: Var<'t, T>,
    pub jac: Option<JacEval<'t, T>>,
}

/// Head output with spatial tangents: `dcols[k][j]` is `∂A[:,j]/∂x_k` and
/// `du[k]` is `∂u/∂x_k`.
struct Head<'t, T> {
    cols: Option<Vec<Var<'t, T>>>,
    u: Var<'t, T>,
    dcols: Vec<Vec<Var<'t, T>>>,
    du: Vec<Var<'t, T>>,
}

const ROT_BIAS: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
const DEGENERATE_NORM: f64 = 1e-12;

fn row_dot<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> TensorResult<Var<'t, T>> {
    let rows = a.shape()[0];
    a.mul(b)?.sum(&[1])?.reshape(&[rows, 1])
}

fn cross<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> TensorResult<Var<'t, T>> {
    let ac: Vec<_> = (0..3).map(|i| a.narrow(i, 1)).collect::<TensorResult<_>>()?;
    let bc: Vec<_> = (0..3).map(|i| b.narrow(i, 1)).collect::<TensorResult<_>>()?;
    let c = |i: usize, j: usize| -> TensorResult<Var<'t, T>> { ac[i].mul(bc[j])?.sub(ac[j].mul(bc[i])?) };
    a.tape().concat(&[c(1, 2)?, c(2, 0)?, c(0, 1)?])
}

fn check_norm<T: Real>(n: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(row) = n.data().iter().position(|v| !(v.as_f64() > DEGENERATE_NORM)) {
        return Err(Error::Degenerate {
            row,
            reason: format!("{what} has vanishing norm"),
        });
    }
    Ok(())
}

/// Gram–Schmidt on 6D rows `[B,6]`, returning the rotation's three columns
/// and, for each input tangent `[B,6]`, the matching column tangents.
pub fn gram_schmidt<'t, T: Real>(
    r: Var<'t, T>,
    tangents: &[Var<'t, T>],
) -> Result<([Var<'t, T>; 3], Vec<[Var<'t, T>; 3]>)> {
    let a1 = r.narrow(0, 3)?;
    let a2 = r.narrow(3, 3)?;
    let n1 = row_dot(a1, a1)?.sqrt()?;
    check_norm(&n1.value(), "first 6D vector")?;
    let c1 = a1.div(n1)?;
    let p = row_dot(c1, a2)?;
    let b2 = a2.sub(c1.mul(p)?)?;
    let n2 = row_dot(b2, b2)?.sqrt()?;
    check_norm(&n2.value(), "second 6D vector after projection")?;
    let c2 = b2.div(n2)?;
    let c3 = cross(c1, c2)?;

    let mut out = Vec::with_capacity(tangents.len());
    for &dr in tangents {
        let da1 = dr.narrow(0, 3)?;
        let da2 = dr.narrow(3, 3)?;
        // d(a/|a|) = (da − c(c·da)) / |a|
        let dc1 = da1.sub(c1.mul(row_dot(c1, da1)?)?)?.div(n1)?;
        let dp = row_dot(dc1, a2)?.add(row_dot(c1, da2)?)?;
        let db2 = da2.sub(c1.mul(dp)?)?.sub(dc1.mul(p)?)?;
        let dc2 = db2.sub(c2.mul(row_dot(c2, db2)?)?)?.div(n2)?;
        let dc3 = cross(dc1, c2)?.add(cross(c1, dc2)?)?;
        out.push([dc1, dc2, dc3]);
    }
    Ok(([c1, c2, c3], out))
}

/// Orthonormalizes 6D rows into rotation matrices `[B,3,3]` (columns
/// `c1, c2, c1×c2`).
pub fn rot6d_to_matrix<T: Real>(r: &Tensor<T>) -> Result<Tensor<T>> {
    if r.rank() != 2 || r.shape()[1] != 6 {
        return Err(contract(format!("expected [B,6] rows, got {:?}", r.shape())));
    }
    let tape = Tape::new();
    let (cols, _) = gram_schmidt(tape.constant(r.clone()), &[])?;
    Ok(stack_columns(&cols))
}

fn const_row<'t, T: Real>(tape: &'t Tape<T>, vals: &[f64]) -> Var<'t, T> {
    tape.constant(Tensor::new(&[vals.len()], vals.iter().map(|&v| T::lit(v)).collect()).unwrap())
}

fn unit<'t, T: Real>(tape: &'t Tape<T>, d: usize, j: usize) -> Var<'t, T> {
    let vals: Vec<f64> = (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
    const_row(tape, &vals)
}

fn head<'t, T: Real>(variant: Variant, dim: usize, raw: Var<'t, T>, tangents: &[Var<'t, T>]) -> Result<Head<'t, T>> {
    let tape = raw.tape();
    match variant {
        Variant::Trans | Variant::Dpf | Variant::ReluPe => Ok(Head {
            cols: None,
            u: raw,
            dcols: vec![Vec::new(); tangents.len()],
            du: tangents.to_vec(),
        }),
        Variant::Affinity => {
            let dd = dim * dim;
            // column j of the row-major block holds entries j, D+j, 2D+j, …
            let columns = |v: Var<'t, T>| -> TensorResult<Vec<Var<'t, T>>> {
                let vt = v.narrow(0, dd)?.transpose()?;
                (0..dim)
                    .map(|j| vt.gather(Rc::new((0..dim).map(|i| i * dim + j).collect()))?.transpose())
                    .collect()
            };
            let cols = columns(raw)?
                .into_iter()
                .enumerate()
                .map(|(j, c)| c.add(unit(tape, dim, j)))
                .collect::<TensorResult<Vec<_>>>()?;
            Ok(Head {
                cols: Some(cols),
                u: raw.narrow(dd, dim)?,
                dcols: tangents.iter().map(|&t| columns(t)).collect::<TensorResult<_>>()?,
                du: tangents.iter().map(|t| t.narrow(dd, dim)).collect::<TensorResult<_>>()?,
            })
        }
        Variant::Se3 | Variant::ScaledSe3 => {
            let r6 = raw.narrow(0, 6)?.add(const_row(tape, &ROT_BIAS))?;
            let t6: Vec<_> = tangents.iter().map(|t| t.narrow(0, 6)).collect::<TensorResult<_>>()?;
            let (q, dq) = gram_schmidt(r6, &t6)?;
            if variant == Variant::Se3 {
                return Ok(Head {
                    cols: Some(q.to_vec()),
                    u: raw.narrow(6, 3)?,
                    dcols: dq.into_iter().map(|c| c.to_vec()).collect(),
                    du: tangents.iter().map(|t| t.narrow(6, 3)).collect::<TensorResult<_>>()?,
                });
            }
            // softplus(z + ln(e − 1)) is exactly 1 at z = 0
            let shift = T::lit((std::f64::consts::E - 1.0).ln());
            let z = raw.narrow(6, 1)?.offset(shift)?;
            let s = z.softplus()?;
            let ds_dz = z.sigmoid()?;
            let cols = q.iter().map(|c| c.mul(s)).collect::<TensorResult<Vec<_>>>()?;
            let mut dcols = Vec::with_capacity(tangents.len());
            for (t, dqk) in tangents.iter().zip(&dq) {
                let ds = t.narrow(6, 1)?.mul(ds_dz)?;
                dcols.push(
                    (0..3)
                        .map(|j| dqk[j].mul(s)?.add(q[j].mul(ds)?))
                        .collect::<TensorResult<Vec<_>>>()?,
                );
            }
            Ok(Head {
                cols: Some(cols),
                u: raw.narrow(7, 3)?,
                dcols,
                du: tangents.iter().map(|t| t.narrow(7, 3)).collect::<TensorResult<_>>()?,
            })
        }
        Variant::BoneCloud => Err(contract("bone cloud has no network head")),
    }
}

/// `Σ_j cols[j] ⊙ x[:, j]`, or `x` itself when `cols` is `None`.
fn apply_linear<'t, T: Real>(cols: Option<&[Var<'t, T>]>, x: Var<'t, T>) -> TensorResult<Var<'t, T>> {
    let Some(cols) = cols else { return Ok(x) };
    let mut acc = cols[0].mul(x.narrow(0, 1)?)?;
    for (j, c) in cols.iter().enumerate().skip(1) {
        acc = acc.add(c.mul(x.narrow(j, 1)?)?)?;
    }
    Ok(acc)
}

fn assemble<'t, T: Real>(x: Var<'t, T>, h: Head<'t, T>, with_jac: bool) -> TensorResult<FieldEval<'t, T>> {
    let tape = x.tape();
    let dim = x.shape()[1];
    let y = apply_linear(h.cols.as_deref(), x)?.add(h.u)?;
    let jac = if with_jac {
        let rows = x.shape()[0];
        let mut columns = Vec::with_capacity(dim);
        let mut grad_sq: Option<Var<'t, T>> = None;
        let mut add_sq = |v: Var<'t, T>| -> TensorResult<()> {
            let s = v.square()?.sum(&[1])?;
            grad_sq = Some(match grad_sq {
                Some(acc) => acc.add(s)?,
                None => s,
            });
            Ok(())
        };
        for k in 0..dim {
            // J[:, k] = A[:, k] + (∂A/∂x_k)·x + ∂u/∂x_k
            let base = match &h.cols {
                Some(c) => c[k],
                None => tape.constant(Tensor::zeros(&[rows, dim])).add(unit(tape, dim, k))?,
            };
            let mut col = base.add(h.du[k])?;
            if h.cols.is_some() {
                col = col.add(apply_linear(Some(&h.dcols[k]), x)?)?;
                for &dc in &h.dcols[k] {
                    add_sq(dc)?;
                }
            }
            add_sq(h.du[k])?;
            columns.push(col);
        }
        Some(JacEval {
            columns,
            grad_sq: grad_sq.expect("dim ≥ 1"),
        })
    } else {
        None
    };
    Ok(FieldEval {
        y,
        a_cols: h.cols,
        u: h.u,
        jac,
    })
}

/// Rows of the stacked parts, reordered so that row `i` of the result is
/// row `order[i]` of the concatenation.
fn stack_rows<'t, T: Real>(parts: &[Var<'t, T>], order: &[usize]) -> TensorResult<Var<'t, T>> {
    let tape = parts[0].tape();
    let stacked = if parts.len() == 1 {
        parts[0]
    } else {
        let shape = parts[0].shape();
        let flat: Vec<Var<'t, T>> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                let w: usize = s[1..].iter().product();
                p.reshape(&[s[0], w])?.transpose()
            })
            .collect::<TensorResult<_>>()?;
        let cat = tape.concat(&flat)?.transpose()?;
        let mut full = vec![cat.shape()[0]];
        full.extend_from_slice(&shape[1..]);
        cat.reshape(&full)?
    };
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        Ok(stacked)
    } else {
        stacked.gather(Rc::new(order.to_vec()))
    }
}

impl<'t, T: Real> BoundModel<'t, T> {
    /// Warps row `i` of `x` to normalized time `times[i]`, optionally with
    /// spatial derivatives.
    pub fn eval(&self, x: Var<'t, T>, times: &[f64], with_jac: bool) -> Result<FieldEval<'t, T>> {
        let tape = x.tape();
        let shape = x.shape();
        let m = self.model;
        if shape.len() != 2 || shape[1] != m.spatial_dim || times.len() != shape[0] {
            return Err(contract(format!(
                "{} times for points of shape {:?} in {}D",
                times.len(),
                shape,
                m.spatial_dim
            )));
        }
        if tape.is_checked() {
            if let Some(&t) = times.iter().find(|t| !(t.abs() <= 1.0 + 1e-12)) {
                return Err(Error::Domain(format!("time {t} outside [-1, 1]")));
            }
        }
        if with_jac && !m.variant.has_jacobian() {
            return Err(contract(format!("{} has no motion Jacobian", m.variant)));
        }
        let b = shape[0];
        let dim = m.spatial_dim;
        let time_col = || tape.constant(Tensor::new(&[b, 1], times.iter().map(|&t| T::lit(t)).collect()).unwrap());
        match &self.net {
            BoundNet::Siren(net) => {
                let q = tape.concat(&[x, time_col()])?;
                let (raw, tangents) = if with_jac {
                    let (raw, tan) = net.forward_with_tangents(q, dim)?;
                    let blocks = (0..dim).map(|k| tangent_block(tan, k, b)).collect::<TensorResult<_>>()?;
                    (raw, blocks)
                } else {
                    (net.forward(q)?, Vec::new())
                };
                Ok(assemble(x, head(m.variant, dim, raw, &tangents)?, with_jac)?)
            }
            BoundNet::ReluPe(net) => {
                let q = tape.concat(&[x, time_col()])?;
                let raw = net.forward(q)?;
                Ok(assemble(x, head(m.variant, dim, raw, &[])?, false)?)
            }
            BoundNet::PerFrame(nets) => self.eval_grouped(x, times, with_jac, |frame, xg| {
                if frame == 0 {
                    let rows = xg.shape()[0];
                    let zero = tape.constant(Tensor::zeros(&[rows, dim]));
                    let h = Head {
                        cols: None,
                        u: zero,
                        dcols: vec![Vec::new(); dim],
                        du: vec![zero; dim],
                    };
                    return Ok(assemble(xg, h, with_jac)?);
                }
                let net = &nets[frame - 1];
                let rows = xg.shape()[0];
                let (raw, tangents) = if with_jac {
                    let (raw, tan) = net.forward_with_tangents(xg, dim)?;
                    let blocks = (0..dim).map(|k| tangent_block(tan, k, rows)).collect::<TensorResult<_>>()?;
                    (raw, blocks)
                } else {
                    (net.forward(xg)?, Vec::new())
                };
                Ok(assemble(xg, head(Variant::Dpf, dim, raw, &tangents)?, with_jac)?)
            }),
            BoundNet::BoneCloud(bones) => self.eval_grouped(x, times, false, |frame, xg| {
                let (y, blended) = bones.warp(xg, frame)?;
                let cols = (0..3).map(|j| blended.narrow(3 * j, 3)).collect::<TensorResult<Vec<_>>>()?;
                Ok(FieldEval {
                    y,
                    a_cols: Some(cols),
                    u: blended.narrow(9, 3)?,
                    jac: None,
                })
            }),
        }
    }

    /// Splits rows by frame, evaluates each group and restores row order.
    fn eval_grouped(
        &self,
        x: Var<'t, T>,
        times: &[f64],
        with_jac: bool,
        mut f: impl FnMut(usize, Var<'t, T>) -> Result<FieldEval<'t, T>>,
    ) -> Result<FieldEval<'t, T>> {
        let frames: Vec<usize> = times
            .iter()
            .map(|&t| self.model.frame_of_time(t))
            .collect::<Result<_>>()?;
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, &k) in frames.iter().enumerate() {
            match groups.iter_mut().find(|(g, _)| *g == k) {
                Some((_, rows)) => rows.push(i),
                None => groups.push((k, vec![i])),
            }
        }
        let single = groups.len() == 1;
        let mut evals = Vec::with_capacity(groups.len());
        for (k, rows) in &groups {
            let xg = if single { x } else { x.gather(Rc::new(rows.clone()))? };
            evals.push(f(*k, xg)?);
        }
        // position of original row i in the concatenation of groups
        let mut order = vec![0; times.len()];
        let mut pos = 0;
        for (_, rows) in &groups {
            for &r in rows {
                order[r] = pos;
                pos += 1;
            }
        }
        let pick = |g: &dyn Fn(&FieldEval<'t, T>) -> Var<'t, T>| -> TensorResult<Var<'t, T>> {
            stack_rows(&evals.iter().map(g).collect::<Vec<_>>(), &order)
        };
        let y = pick(&|e| e.y)?;
        let u = pick(&|e| e.u)?;
        let a_cols = if evals.iter().all(|e| e.a_cols.is_some()) {
            let d = self.model.spatial_dim;
            Some((0..d).map(|j| pick(&|e| e.a_cols.as_ref().unwrap()[j])).collect::<TensorResult<_>>()?)
        } else {
            None
        };
        let jac = if with_jac {
            let d = self.model.spatial_dim;
            Some(JacEval {
                columns: (0..d)
                    .map(|k| pick(&|e| e.jac.as_ref().unwrap().columns[k]))
                    .collect::<TensorResult<_>>()?,
                grad_sq: pick(&|e| e.jac.as_ref().unwrap().grad_sq)?,
            })
        } else {
            None
        };
        Ok(FieldEval { y, a_cols, u, jac })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(b: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, d], |_| rng.gen_range(-1.0..1.0))
    }

    fn zero_model(variant: Variant) -> MotionModel<f64> {
        let out = variant.out_dim(3).unwrap();
        let net = Network::Siren(SirenParams::zeros(4, 8, 1, out, OMEGA_FIRST).unwrap());
        MotionModel::new(variant, 3, 0.0, 9.0, net).unwrap()
    }

    #[test]
    fn six_d_examples() {
        let r = Tensor::new(&[2, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0]).unwrap();
        let m = rot6d_to_matrix(&r).unwrap();
        let want = [
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        for b in 0..2 {
            for i in 0..9 {
                assert_relative_eq!(m.data()[b * 9 + i], want[b][i], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn six_d_degeneracy_reports_row() {
        let r = Tensor::new(&[2, 6], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!(matches!(rot6d_to_matrix(&r), Err(Error::Degenerate { row: 1, .. })));
        let z = Tensor::<f64>::zeros(&[1, 6]);
        assert!(matches!(rot6d_to_matrix(&z), Err(Error::Degenerate { row: 0, .. })));
    }

    #[test]
    fn zero_nets_are_identity_maps() {
        let x = points(5, 3, 1);
        for v in [Variant::Trans, Variant::Se3, Variant::ScaledSe3, Variant::Affinity] {
            let m = zero_model(v);
            let y = m.warp(&x, 0.3).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert_relative_eq!(*a, *b, epsilon = 1e-14);
            }
            let j = m.motion_jacobian(&x, 0.3).unwrap();
            for b in 0..5 {
                for r in 0..3 {
                    for c in 0..3 {
                        let want = if r == c { 1.0 } else { 0.0 };
                        assert_relative_eq!(j.at(&[b, r, c]), want, epsilon = 1e-14);
                    }
                }
            }
        }
        let trans = zero_model(Variant::Trans).evaluate_map(&x, -1.0).unwrap();
        assert!(trans.u.data().iter().all(|&v| v == 0.0));
        let scaled = zero_model(Variant::ScaledSe3).evaluate_map(&x, 0.0).unwrap();
        assert_relative_eq!(scaled.a.at(&[0, 0, 0]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn affinity_bias_encodes_a_map() {
        let mut m = zero_model(Variant::Affinity);
        if let Network::Siren(p) = &mut m.net {
            // A = 2I, u = (1,0,0); the head adds I to the first nine outputs
            let bias = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
            p.output_layer_mut().bias = Tensor::new(&[12], bias.to_vec()).unwrap();
        }
        let y = m.warp(&Tensor::new(&[1, 3], vec![1.0, 1.0, 1.0]).unwrap(), 0.0).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0, 2.0]);
        let j = m.motion_jacobian(&points(3, 3, 2), 0.5).unwrap();
        assert_eq!(j.at(&[1, 0, 0]), 2.0);
        assert_eq!(j.at(&[1, 0, 1]), 0.0);
    }

    #[test]
    fn affinity_with_zero_linear_part_is_a_translation_field() {
        let mut m = zero_model(Variant::Affinity);
        if let Network::Siren(p) = &mut m.net {
            let mut bias = vec![-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0];
            bias.extend([0.25, -0.5, 0.75]);
            p.output_layer_mut().bias = Tensor::new(&[12], bias).unwrap();
        }
        let y = m.warp(&points(4, 3, 3), 0.0).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.25, -0.5, 0.75]);
        }
    }

    #[test]
    fn rotation_heads_stay_orthonormal() {
        for v in [Variant::Se3, Variant::ScaledSe3] {
            let m = MotionModel::<f64>::siren(v, 3, 16, 2, 10, 3).unwrap();
            let map = m.evaluate_map(&points(50, 3, 4), 0.2).unwrap();
            for b in 0..50 {
                let a: Vec<f64> = map.a.data()[b * 9..b * 9 + 9].to_vec();
                // AᵀA = s²I
                let s2 = a[0] * a[0] + a[3] * a[3] + a[6] * a[6];
                for i in 0..3 {
                    for j in 0..3 {
                        let dot: f64 = (0..3).map(|r| a[r * 3 + i] * a[r * 3 + j]).sum();
                        let want = if i == j { s2 } else { 0.0 };
                        assert!((dot - want).abs() <= 1e-10);
                    }
                }
                let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                    + a[2] * (a[3] * a[7] - a[4] * a[6]);
                assert!(det > 0.0);
                assert!((det - s2.powf(1.5)).abs() <= 1e-9);
                if v == Variant::Se3 {
                    assert!((s2 - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    fn fd_jacobian(m: &MotionModel<f64>, x: &Tensor<f64>, t: f64) -> Tensor<f64> {
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let h = 1e-6;
        let mut out = Tensor::zeros(&[b, d, d]);
        for k in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            for r in 0..b {
                xp.data_mut()[r * d + k] += h;
                xm.data_mut()[r * d + k] -= h;
            }
            let (yp, ym) = (m.warp(&xp, t).unwrap(), m.warp(&xm, t).unwrap());
            for r in 0..b {
                for i in 0..d {
                    out.data_mut()[r * d * d + i * d + k] = (yp.at(&[r, i]) - ym.at(&[r, i])) / (2.0 * h);
                }
            }
        }
        out
    }

    #[test]
    fn motion_jacobian_matches_finite_differences() {
        for v in [Variant::Trans, Variant::Se3, Variant::ScaledSe3, Variant::Affinity, Variant::Dpf] {
            let m = MotionModel::<f64>::siren(v, 3, 16, 2, 5, 9).unwrap();
            let x = points(8, 3, 10);
            let t = m.time_of_frame(3);
            let (an, fd) = (m.motion_jacobian(&x, t).unwrap(), fd_jacobian(&m, &x, t));
            for (a, f) in an.data().iter().zip(fd.data()) {
                assert!((a - f).abs() <= 1e-4 * a.abs().max(1.0), "{v}: {a} vs {f}");
            }
        }
        let m = MotionModel::<f64>::siren(Variant::Affinity, 2, 16, 2, 5, 9).unwrap();
        let x = points(8, 2, 10);
        let (an, fd) = (m.motion_jacobian(&x, 0.1).unwrap(), fd_jacobian(&m, &x, 0.1));
        for (a, f) in an.data().iter().zip(fd.data()) {
            assert!((a - f).abs() <= 1e-4 * a.abs().max(1.0));
        }
    }

    #[test]
    fn constant_affinity_output_has_jacobian_a() {
        let mut m = zero_model(Variant::Affinity);
        if let Network::Siren(p) = &mut m.net {
            let bias: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
            p.output_layer_mut().bias = Tensor::new(&[12], bias).unwrap();
            // nonzero inner weights, but the output layer ignores them
            p.layers[0].weight = Tensor::from_fn(&[8, 4], |i| (i as f64).sin());
        }
        let x = points(4, 3, 5);
        let map = m.evaluate_map(&x, 0.0).unwrap();
        assert_eq!(m.motion_jacobian(&x, 0.0).unwrap(), map.a);
    }

    #[test]
    fn per_frame_fields_select_their_frame() {
        let m = MotionModel::<f64>::siren(Variant::Dpf, 3, 8, 1, 4, 1).unwrap();
        let x = points(6, 3, 6);
        assert_eq!(m.warp(&x, -1.0).unwrap(), x);
        assert!(m.warp(&x, 0.1).is_err());
        // mixed times agree with per-time evaluation
        let times: Vec<f64> = (0..6).map(|i| m.time_of_frame(i % 4)).collect();
        let mixed = m.warp_rows(&x, &times).unwrap();
        for r in 0..6 {
            let single = m.warp(&x, times[r]).unwrap();
            assert_eq!(mixed.row(r), single.row(r));
        }
    }

    #[test]
    fn time_normalization_is_affine() {
        let m = MotionModel::<f64>::siren(Variant::Trans, 3, 8, 1, 21, 0).unwrap();
        assert_eq!(m.time_of_frame(0), -1.0);
        assert_eq!(m.time_of_frame(20), 1.0);
        assert_eq!(m.time_of_frame(10), 0.0);
        for k in 0..21 {
            assert_eq!(m.frame_of_time(m.time_of_frame(k)).unwrap(), k);
        }
    }

    #[test]
    fn checked_warp_rejects_out_of_range_time() {
        let m = zero_model(Variant::Trans);
        assert!(matches!(m.warp_checked(&points(2, 3, 0), 1.5), Err(Error::Domain(_))));
        assert!(m.warp_checked(&points(2, 3, 0), 1.0).is_ok());
    }

    #[test]
    fn unsupported_jacobian_is_a_contract_error() {
        let relu = ReluPeParams::<f64>::init(4, 0, 8, 2, 3, 0).unwrap();
        let m = MotionModel::new(Variant::ReluPe, 3, 0.0, 3.0, Network::ReluPe(relu)).unwrap();
        assert!(matches!(m.motion_jacobian(&points(2, 3, 0), 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
        }
        assert!("quaternion".parse::<Variant>().is_err());
    }
}
