//! Central finite-difference checks of reverse-mode gradients.

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
}

fn set_flat(var: &Var, values: &[f64]) -> Result<()> {
    let t = Tensor::from_vec(values.to_vec(), var.dims(), var.device())?;
    Ok(var.set(&t)?)
}

/// Compares `∂f/∂v` from backprop with `(f(v+h) − f(v−h)) / 2h` at
/// `per_var` randomly chosen entries of each variable. Variables must be f64.
pub fn check_gradients<F>(f: F, vars: &[Var], per_var: usize, step: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    if vars.iter().any(|v| v.dtype() != DType::F64) {
        return Err(Error::InvalidArgument("gradient checks run in f64".into()));
    }
    let grads = f()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
    };
    for var in vars {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let n = base.len();
        let picks: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..n)).collect()
        };
        for k in picks {
            let mut probe = base.clone();
            probe[k] = base[k] + step;
            set_flat(var, &probe)?;
            let up = f()?.to_scalar::<f64>()?;
            probe[k] = base[k] - step;
            set_flat(var, &probe)?;
            let down = f()?.to_scalar::<f64>()?;
            set_flat(var, &base)?;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn exact_for_a_quadratic() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let r = check_gradients(|| Ok(v.as_tensor().sqr()?.sum_all()?), &[v.clone()], 3, 1e-5, 0).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_relative_error < 1e-8);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        // detach() hides the x² factor from backprop.
        let f = || Ok((v.as_tensor() * v.as_tensor().detach())?.sum_all()?);
        let r = check_gradients(f, &[v.clone()], 2, 1e-5, 0).unwrap();
        assert!(r.max_relative_error > 0.4);
    }
}
