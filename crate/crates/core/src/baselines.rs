//! Comparison models: a ReLU MLP with optional Fourier positional encoding,
//! and a linear-blend-skinning bone cloud.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::geometry::Point3;
use crate::real::Real;
use crate::siren::Layer;
use crate::tensor::{Tape, Tensor, TensorResult, Var};

/// Default hidden width and depth of the ReLU baseline.
pub const RELU_WIDTH: usize = 128;
pub const RELU_LAYERS: usize = 6;
/// Default bone count and RBF falloff of the bone cloud.
pub const BONE_COUNT: usize = 1024;
pub const BONE_SIGMA: f64 = 10.0;

/// `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]`.
pub fn fourier_pe<'t, T: Real>(p: Var<'t, T>, levels: usize) -> TensorResult<Var<'t, T>> {
    if levels == 0 {
        return Ok(p);
    }
    let mut parts = vec![p];
    for k in 0..levels {
        let s = p.scale(T::lit(2f64.powi(k as i32) * std::f64::consts::PI))?;
        parts.push(s.sin()?);
        parts.push(s.cos()?);
    }
    p.tape().concat(&parts)
}

pub fn pe_width(dim: usize, levels: usize) -> usize {
    dim + 2 * levels * dim
}

/// ReLU MLP predicting a displacement from `[x; t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluPeParams<T> {
    /// Width of the raw input `[x; t]` before encoding.
    pub in_dim: usize,
    pub pe_levels: usize,
    pub width: usize,
    pub n_hidden: usize,
    pub out_dim: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> ReluPeParams<T> {
    /// Weights ~ `U(±1/√fan_in)`, biases zero.
    pub fn init(in_dim: usize, pe_levels: usize, width: usize, n_hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || width == 0 || n_hidden == 0 || out_dim == 0 {
            return Err(contract("relu baseline needs nonzero extents"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![(width, pe_width(in_dim, pe_levels))];
        dims.extend(std::iter::repeat((width, width)).take(n_hidden - 1));
        dims.push((out_dim, width));
        let layers = dims
            .into_iter()
            .map(|(rows, cols)| {
                let bound = 1.0 / (cols as f64).sqrt();
                Layer {
                    weight: Tensor::from_fn(&[rows, cols], |_| T::lit(rng.gen_range(-bound..bound))),
                    bias: Tensor::zeros(&[rows]),
                }
            })
            .collect();
        Ok(Self {
            in_dim,
            pe_levels,
            width,
            n_hidden,
            out_dim,
            layers,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundRelu<'t, T> {
        BoundRelu {
            vars: self.tensors().into_iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
            pe_levels: self.pe_levels,
        }
    }

    pub fn forward(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).forward(tape.constant(q.clone()))?;
        Ok((*out.value()).clone())
    }
}

#[derive(Clone)]
pub struct BoundRelu<'t, T> {
    pub vars: Vec<Var<'t, T>>,
    pe_levels: usize,
}

impl<'t, T: Real> BoundRelu<'t, T> {
    pub fn from_vars(p: &ReluPeParams<T>, vars: Vec<Var<'t, T>>) -> Self {
        assert_eq!(vars.len(), 2 * p.layers.len());
        Self {
            vars,
            pe_levels: p.pe_levels,
        }
    }

    pub fn forward(&self, q: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let last = self.vars.len() / 2 - 1;
        let mut h = fourier_pe(q, self.pe_levels)?;
        for i in 0..last {
            h = h.matmul_t(self.vars[2 * i])?.add(self.vars[2 * i + 1])?.relu()?;
        }
        h.matmul_t(self.vars[2 * last])?.add(self.vars[2 * last + 1])
    }
}

/// Bones with per-frame rigid transforms, blended by normalized RBF
/// weights `exp(−σ‖x − v_k‖)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneCloudParams<T> {
    /// `[K, 3]` canonical bone positions.
    pub bones: Tensor<T>,
    /// `[frames, K, 9]`: a 6D rotation followed by a translation.
    pub transforms: Tensor<T>,
    pub sigma: T,
}

const IDENTITY_TRANSFORM: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];

impl<T: Real> BoneCloudParams<T> {
    /// Identity transforms at the given bone positions.
    pub fn new(bones: &[Point3], frames: usize, sigma: f64) -> Result<Self> {
        if bones.is_empty() || frames == 0 || !(sigma > 0.0) {
            return Err(contract("bone cloud needs K ≥ 1, frames ≥ 1 and σ > 0"));
        }
        let k = bones.len();
        Ok(Self {
            bones: crate::geometry::points_to_tensor(bones),
            transforms: Tensor::from_fn(&[frames, k, 9], |i| T::lit(IDENTITY_TRANSFORM[i % 9])),
            sigma: T::lit(sigma),
        })
    }

    /// `k` bones drawn uniformly from the bounding box of `points`.
    pub fn init(points: &[Point3], k: usize, frames: usize, sigma: f64, seed: u64) -> Result<Self> {
        if points.is_empty() {
            return Err(contract("bone placement needs points"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bones: Vec<Point3> = (0..k)
            .map(|_| std::array::from_fn(|a| lo[a] + (hi[a] - lo[a]) * rng.gen::<f64>()))
            .collect();
        Self::new(&bones, frames, sigma)
    }

    pub fn bone_count(&self) -> usize {
        self.bones.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.transforms.shape()[0]
    }

    /// Normalized blend weights `[B, K]`.
    pub fn weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, k) = (x.shape()[0], self.bone_count());
        let (xd, vd) = (x.data(), self.bones.data());
        let eps = T::lit(1e-12);
        let mut w = vec![T::zero(); b * k];
        for r in 0..b {
            let row = &mut w[r * k..(r + 1) * k];
            let mut total = T::zero();
            for (j, wj) in row.iter_mut().enumerate() {
                let d2 = (0..3).map(|a| (xd[r * 3 + a] - vd[j * 3 + a]).powi(2)).sum::<T>();
                *wj = (-self.sigma * (d2 + eps).sqrt()).exp();
                total = total + *wj;
            }
            if !(total > T::zero()) {
                return Err(Error::Degenerate {
                    row: r,
                    reason: "every bone weight underflowed; use a smaller σ".into(),
                });
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        Ok(Tensor::new(&[b, k], w)?)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundBones<'t, T> {
        BoundBones {
            params: self.clone(),
            transforms: tape.leaf(self.transforms.clone(), trainable),
        }
    }

    pub fn warp(&self, x: &Tensor<T>, frame: usize) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (y, _) = bound.warp(tape.constant(x.clone()), frame)?;
        Ok((*y.value()).clone())
    }
}

pub struct BoundBones<'t, T> {
    params: BoneCloudParams<T>,
    pub transforms: Var<'t, T>,
}

impl<'t, T: Real> BoundBones<'t, T> {
    /// Warped points `[B,3]` and the blended `[B,12]` transform, laid out
    /// as the three columns of the linear part followed by the translation.
    pub fn warp(&self, x: Var<'t, T>, frame: usize) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let frames = self.params.frames();
        if frame >= frames {
            return Err(contract(format!("frame {frame} outside the {frames} bone frames")));
        }
        let tape = x.tape();
        let k = self.params.bone_count();
        let w = tape.constant(self.params.weights(&x.value())?);
        let per_bone = self
            .transforms
            .reshape(&[frames, k * 9])?
            .gather(Rc::new(vec![frame]))?
            .reshape(&[k, 9])?;
        let (cols, _) = crate::motion::gram_schmidt(per_bone.narrow(0, 6)?, &[])?;
        let mut parts = cols.to_vec();
        parts.push(per_bone.narrow(6, 3)?);
        let blended = w.matmul(tape.concat(&parts)?)?;
        let mut y = blended.narrow(9, 3)?;
        for j in 0..3 {
            y = y.add(blended.narrow(3 * j, 3)?.mul(x.narrow(j, 1)?)?)?;
        }
        Ok((y, blended))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pe_shapes_and_values() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::zeros(&[2, 4]));
        assert_eq!(fourier_pe(p, 0).unwrap().id(), p.id());
        let e = fourier_pe(p, 6).unwrap().value();
        assert_eq!(e.shape(), &[2, 52]);
        for k in 0..6 {
            let base = 4 + 8 * k;
            assert!(e.row(0)[base..base + 4].iter().all(|&v| v == 0.0));
            assert!(e.row(0)[base + 4..base + 8].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn pe_is_injective_on_a_grid() {
        let tape = Tape::<f64>::new();
        let n = 64;
        let grid = Tensor::from_fn(&[n * n, 2], |i| {
            let (r, c) = (i / 2, i % 2);
            let idx = if c == 0 { r / n } else { r % n };
            -1.0 + 2.0 * idx as f64 / n as f64
        });
        let e = fourier_pe(tape.constant(grid), 1).unwrap().value();
        let mut keys: Vec<Vec<i64>> = (0..n * n)
            .map(|r| e.row(r)[2..].iter().map(|v| (v * 1e9).round() as i64).collect())
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n * n);
    }

    #[test]
    fn zero_relu_net_predicts_no_motion() {
        let mut p = ReluPeParams::<f64>::init(4, 6, 16, 3, 3, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let q = Tensor::from_fn(&[5, 4], |i| i as f64 * 0.1);
        assert!(p.forward(&q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_blocks_gradient_of_negative_preactivations() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![-1.0, 0.5, -0.2]).unwrap());
        let loss = x.relu().unwrap().sum_all().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn single_bone_applies_its_rigid_transform() {
        let mut bc = BoneCloudParams::<f64>::new(&[[0.3, 0.2, 0.1]], 2, 3.0).unwrap();
        // frame 1: 90° about z then shift
        bc.transforms.data_mut()[9..18].copy_from_slice(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.5, 0.0, 0.0]);
        let x = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 1.0]).unwrap();
        let y = bc.warp(&x, 1).unwrap();
        let want = [0.5, 1.0, 0.0, -1.5, 0.0, 1.0];
        for (a, b) in y.data().iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        assert_eq!(bc.warp(&x, 0).unwrap(), x);
    }

    #[test]
    fn weights_partition_unity() {
        let pts: Vec<Point3> = (0..50).map(|i| [(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), 0.1 * i as f64 - 2.5]).collect();
        let bc = BoneCloudParams::<f64>::init(&pts, 64, 1, BONE_SIGMA, 4).unwrap();
        let w = bc.weights(&crate::geometry::points_to_tensor(&pts)).unwrap();
        for r in 0..50 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sharp_falloff_selects_the_coincident_bone() {
        let bones = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mut bc = BoneCloudParams::<f64>::new(&bones, 1, 50.0).unwrap();
        bc.transforms.data_mut()[9 + 6] = 0.25; // bone 1 shifts along x
        let x = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let y = bc.warp(&x, 0).unwrap();
        assert!((y.data()[0] - 1.25).abs() < 1e-9);
    }

    #[test]
    fn underflow_is_reported() {
        let bc = BoneCloudParams::<f64>::new(&[[0.0; 3]], 1, 1e6).unwrap();
        let x = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(bc.weights(&x), Err(Error::Degenerate { row: 0, .. })));
    }
}
