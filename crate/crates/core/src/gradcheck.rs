//! Central-difference checks of tape gradients with respect to model
//! parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::motion::{BoundModel, MotionModel};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Entry with the largest error: (tensor, index, analytic, numeric).
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the tape gradient of `loss` with central differences of step
/// `h` on `per_tensor` randomly chosen entries of every parameter tensor.
pub fn check_param_gradients<F>(model: &MotionModel<f64>, loss: F, per_tensor: usize, h: f64, seed: u64) -> Result<GradCheck>
where
    F: for<'t> Fn(&BoundModel<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let l = loss(&bound)?;
    if l.shape().iter().product::<usize>() != 1 {
        return Err(contract("loss must be a scalar"));
    }
    let base_loss = l.item();
    tape.backward(l)?;
    let grads: Vec<_> = bound.vars.iter().map(|v| tape.grad(*v)).collect();

    let eval = |m: &MotionModel<f64>| -> Result<f64> {
        let tape = Tape::new();
        let b = m.bind(&tape, false);
        Ok(loss(&b)?.item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (ti, g) in grads.iter().enumerate() {
        let len = model.params()[ti].len();
        for _ in 0..per_tensor.min(len) {
            let j = rng.gen_range(0..len);
            let base = model.params()[ti].data()[j];
            probe.params_mut()[ti].data_mut()[j] = base + h;
            let up = eval(&probe)?;
            probe.params_mut()[ti].data_mut()[j] = base - h;
            let down = eval(&probe)?;
            probe.params_mut()[ti].data_mut()[j] = base;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.as_ref().map_or(0.0, |g| g.data()[j]);
            // below this magnitude differences are dominated by rounding in the
            // central difference (about 1e-16·|L|/h)
            let err = relative_error(analytic, numeric, 1e-5 * base_loss.abs().max(1.0));
            out.checked += 1;
            if err > out.max_rel_err || !err.is_finite() {
                out.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                out.worst = (ti, j, analytic, numeric);
            }
        }
    }
    Ok(out)
}
