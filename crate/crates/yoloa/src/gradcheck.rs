//! Central finite-difference gradient checking against the tape.
//!
//! Checks run in `f64` on small randomized inputs. A check perturbs a sample
//! of input coordinates, compares `(f(x+h) - f(x-h)) / 2h` with the analytic
//! gradient, and fails on the first coordinate whose relative error exceeds
//! the tolerance.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Default step for central differences in f64.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error tolerance used by the acceptance gradient suite.
pub const FD_TOL: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug)]
pub struct FdFailure {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl std::fmt::Display for FdFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "input {} coord {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            self.input, self.coord, self.analytic, self.numeric, self.rel_err
        )
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check the analytic gradient of `f` at `inputs`.
///
/// `f` maps the inputs to `(loss, per-input gradients)`; it is re-evaluated
/// with perturbed copies for the numeric side. `coords_per_input` coordinates
/// are sampled per input (all coordinates when the input is smaller).
pub fn check_gradients<F>(
    inputs: &[ArrayD<f64>],
    f: F,
    coords_per_input: usize,
    step: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), FdFailure>
where
    F: Fn(&[ArrayD<f64>]) -> (f64, Vec<ArrayD<f64>>),
{
    let (_, grads) = f(inputs);
    assert_eq!(grads.len(), inputs.len(), "gradient count mismatch");
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= coords_per_input {
            (0..n).collect()
        } else {
            (0..coords_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let mut plus = inputs.to_vec();
            plus[ii].as_slice_mut().unwrap()[c] += step;
            let (lp, _) = f(&plus);
            let mut minus = inputs.to_vec();
            minus[ii].as_slice_mut().unwrap()[c] -= step;
            let (lm, _) = f(&minus);
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads[ii].as_slice().unwrap()[c];
            let re = rel_err(analytic, numeric);
            if re > tol {
                return Err(FdFailure {
                    input: ii,
                    coord: c,
                    analytic,
                    numeric,
                    rel_err: re,
                });
            }
        }
    }
    Ok(())
}

/// Uniform random array in [lo, hi).
pub fn rand_array(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| rng.gen_range(lo..hi))
}
