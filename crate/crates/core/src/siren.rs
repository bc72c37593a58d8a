//! Sinusoidal MLP: initialization, forward pass, analytical spatial
//! Jacobian and parameter accounting.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::motion::Variant;
use crate::real::Real;
use crate::tensor::{Tape, Tensor, TensorResult, Var};

/// Default frequency of the first layer.
pub const OMEGA_FIRST: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `d_out × d_in`, row-major.
    pub weight: Tensor<T>,
    /// `[d_out]`.
    pub bias: Tensor<T>,
}

/// Weights and biases of a sine-activated MLP `in → d → … → d → out`.
///
/// `layers[0]` is the input layer, whose pre-activation is multiplied by
/// `omega_first`; `layers[1..=n_hidden]` are the `d×d` hidden layers and the
/// last entry is the linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenParams<T> {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_hidden: usize,
    pub out_dim: usize,
    pub omega_first: T,
    pub layers: Vec<Layer<T>>,
}

fn check_dims(in_dim: usize, d: usize, n: usize, out_dim: usize) -> Result<()> {
    if in_dim == 0 || n == 0 || out_dim == 0 || d < 2 {
        return Err(contract(format!(
            "siren needs in_dim, n, out_dim ≥ 1 and d ≥ 2 (got {in_dim}, {d}, {n}, {out_dim})"
        )));
    }
    Ok(())
}

fn layer_dims(in_dim: usize, d: usize, n: usize, out_dim: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(d, in_dim)];
    dims.extend(std::iter::repeat((d, d)).take(n));
    dims.push((out_dim, d));
    dims
}

/// Seeded SIREN initialization. First-layer weights are drawn from
/// `U(±1/in_dim)`, all later layers from `U(±√(6/fan_in))`; biases are zero.
pub fn init_siren<T: Real>(
    in_dim: usize,
    d: usize,
    n: usize,
    out_dim: usize,
    omega_first: f64,
    seed: u64,
) -> Result<SirenParams<T>> {
    check_dims(in_dim, d, n, out_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims(in_dim, d, n, out_dim)
        .into_iter()
        .enumerate()
        .map(|(i, (rows, cols))| {
            let bound = if i == 0 {
                1.0 / cols as f64
            } else {
                (6.0 / cols as f64).sqrt()
            };
            Layer {
                weight: Tensor::from_fn(&[rows, cols], |_| T::lit(rng.gen_range(-bound..bound))),
                bias: Tensor::zeros(&[rows]),
            }
        })
        .collect();
    Ok(SirenParams {
        in_dim,
        hidden_dim: d,
        n_hidden: n,
        out_dim,
        omega_first: T::lit(omega_first),
        layers,
    })
}

/// Number of trainable weight entries for a variant, excluding biases.
///
/// `frames` is only consulted for [`Variant::Dpf`], which holds one field
/// per non-canonical frame.
pub fn param_count(variant: Variant, d: usize, n: usize, frames: usize) -> Result<usize> {
    let hidden = n * d * d;
    Ok(match variant {
        Variant::Trans => 7 * d + hidden,
        Variant::Se3 => 13 * d + hidden,
        Variant::ScaledSe3 => 14 * d + hidden,
        Variant::Affinity => 16 * d + hidden,
        Variant::Dpf => {
            if frames < 2 {
                return Err(contract("per-frame fields need at least 2 frames"));
            }
            (6 * d + hidden) * (frames - 1)
        }
        Variant::ReluPe | Variant::BoneCloud => {
            return Err(contract(format!("{variant} is not a sine network")))
        }
    })
}

impl<T: Real> SirenParams<T> {
    /// A network whose weights and biases are all zero.
    pub fn zeros(in_dim: usize, d: usize, n: usize, out_dim: usize, omega_first: f64) -> Result<Self> {
        check_dims(in_dim, d, n, out_dim)?;
        let layers = layer_dims(in_dim, d, n, out_dim)
            .into_iter()
            .map(|(rows, cols)| Layer {
                weight: Tensor::zeros(&[rows, cols]),
                bias: Tensor::zeros(&[rows]),
            })
            .collect();
        Ok(SirenParams {
            in_dim,
            hidden_dim: d,
            n_hidden: n,
            out_dim,
            omega_first: T::lit(omega_first),
            layers,
        })
    }

    pub fn output_layer(&self) -> &Layer<T> {
        self.layers.last().expect("siren has layers")
    }

    pub fn output_layer_mut(&mut self) -> &mut Layer<T> {
        self.layers.last_mut().expect("siren has layers")
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }

    /// Weights and biases interleaved per layer: `W0, b0, W1, b1, …`.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Euclidean norm of all weights and biases together.
    pub fn norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    /// Records the parameters on `tape`; gradients are tracked when
    /// `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundSiren<'t, T> {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundSiren::from_vars(self, vars)
    }

    /// Plain forward pass.
    pub fn forward(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let out = net.forward(tape.constant(q.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Forward pass on a checked tape: non-finite inputs are rejected.
    pub fn forward_checked(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        if !q.all_finite() {
            return Err(crate::error::Error::Domain("non-finite network input".into()));
        }
        let tape = Tape::checked();
        let net = self.bind(&tape, false);
        let out = net.forward(tape.constant(q.clone()))?;
        Ok((*out.value()).clone())
    }

    /// `∂out/∂q[:, k]` for the first `spatial_dim` input columns, as a
    /// `B × out_dim × spatial_dim` tensor.
    pub fn spatial_jacobian(&self, q: &Tensor<T>, spatial_dim: usize) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let (_, tangents) = net.forward_with_tangents(tape.constant(q.clone()), spatial_dim)?;
        let b = q.shape()[0];
        let out = self.out_dim;
        let jt = tangents.value();
        Ok(Tensor::from_fn(&[b, out, spatial_dim], |i| {
            let (row, rest) = (i / (out * spatial_dim), i % (out * spatial_dim));
            let (c, k) = (rest / spatial_dim, rest % spatial_dim);
            jt.data()[(k * b + row) * out + c]
        }))
    }

    /// `dⁿ · ∏ ‖Wᵢ‖₂` over all layers, with the first layer's weight taken
    /// as `omega_first · W₀` (the matrix actually applied to the input).
    pub fn spectral_bound(&self) -> f64 {
        let omega = self.omega_first.as_f64().abs();
        let prod: f64 = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let s = spectral_norm(&l.weight);
                if i == 0 {
                    s * omega
                } else {
                    s
                }
            })
            .product();
        (self.hidden_dim as f64).powi(self.n_hidden as i32) * prod
    }
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm<T: Real>(w: &Tensor<T>) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let a: Vec<f64> = w.data().iter().map(|x| x.as_f64()).collect();
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut av = vec![0.0; rows];
    let mut sigma = 0.0;
    for it in 0..1000 {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        for r in 0..rows {
            av[r] = (0..cols).map(|c| a[r * cols + c] * v[c]).sum();
        }
        let next = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (c, vc) in v.iter_mut().enumerate() {
            *vc = (0..rows).map(|r| a[r * cols + c] * av[r]).sum();
        }
        let converged = (next - sigma).abs() <= 1e-10 * next.max(1.0);
        sigma = next;
        if it >= 100 && converged {
            break;
        }
    }
    // power iteration approaches σ from below; one ulp-scale margin keeps
    // the bound conservative
    sigma * (1.0 + 1e-9)
}

/// A [`SirenParams`] recorded on a tape.
#[derive(Clone)]
pub struct BoundSiren<'t, T> {
    pub vars: Vec<Var<'t, T>>,
    omega: T,
    out_dim: usize,
    in_dim: usize,
}

impl<'t, T: Real> BoundSiren<'t, T> {
    /// `vars` in the order of [`SirenParams::tensors`].
    pub fn from_vars(p: &SirenParams<T>, vars: Vec<Var<'t, T>>) -> Self {
        assert_eq!(vars.len(), 2 * p.layers.len());
        Self {
            vars,
            omega: p.omega_first,
            out_dim: p.out_dim,
            in_dim: p.in_dim,
        }
    }

    fn w(&self, i: usize) -> Var<'t, T> {
        self.vars[2 * i]
    }

    fn b(&self, i: usize) -> Var<'t, T> {
        self.vars[2 * i + 1]
    }

    fn n_layers(&self) -> usize {
        self.vars.len() / 2
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, q: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let last = self.n_layers() - 1;
        let mut h = q.matmul_t(self.w(0))?.add(self.b(0))?.scale(self.omega)?.sin()?;
        for i in 1..last {
            h = h.matmul_t(self.w(i))?.add(self.b(i))?.sin()?;
        }
        h.matmul_t(self.w(last))?.add(self.b(last))
    }

    /// Forward pass plus the directional derivatives of the output along
    /// the first `s` input axes.
    ///
    /// The tangents come back stacked as `[s·B, out]`, block `k` holding
    /// `∂out/∂q[:, k]`; [`tangent_block`] slices one out. Each hidden layer
    /// maps a tangent `G` to `cos(zᵢ) ⊙ (G·Wᵢᵀ)`, so the result stays a
    /// first-order tape expression in the parameters.
    pub fn forward_with_tangents(&self, q: Var<'t, T>, s: usize) -> TensorResult<(Var<'t, T>, Var<'t, T>)> {
        assert!(s >= 1 && s <= self.in_dim, "spatial extent {s} exceeds input width {}", self.in_dim);
        let b = q.shape()[0];
        let d = self.w(0).shape()[0];
        let last = self.n_layers() - 1;

        let z0 = q.matmul_t(self.w(0))?.add(self.b(0))?.scale(self.omega)?;
        let mut h = z0.sin()?;
        // G₀[k] = cos(z₀) ⊙ ω·W₀[:, k]
        let cols = self.w(0).narrow(0, s)?.transpose()?.scale(self.omega)?;
        let repeat: Vec<usize> = (0..s).flat_map(|k| std::iter::repeat(k).take(b)).collect();
        let mut g = cols
            .gather(Rc::new(repeat))?
            .reshape(&[s, b, d])?
            .mul(z0.cos()?)?
            .reshape(&[s * b, d])?;
        for i in 1..last {
            let z = h.matmul_t(self.w(i))?.add(self.b(i))?;
            h = z.sin()?;
            g = g
                .matmul_t(self.w(i))?
                .reshape(&[s, b, d])?
                .mul(z.cos()?)?
                .reshape(&[s * b, d])?;
        }
        let out = h.matmul_t(self.w(last))?.add(self.b(last))?;
        let tangents = g.matmul_t(self.w(last))?;
        Ok((out, tangents))
    }
}

/// Block `k` of a stacked tangent tensor `[s·B, w]`, as `[B, w]`.
pub fn tangent_block<'t, T: Real>(tangents: Var<'t, T>, k: usize, b: usize) -> TensorResult<Var<'t, T>> {
    let w = tangents.shape()[1];
    let s = tangents.shape()[0] / b.max(1);
    tangents
        .reshape(&[s, b * w])?
        .gather(Rc::new(vec![k]))?
        .reshape(&[b, w])
}
