use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
    /// Coordinates whose step had to shrink because the stencil crossed a
    /// leaky-ReLU kink.
    pub shrunk_steps: usize,
}

/// Compares reverse-mode gradients of a scalar closure against central
/// differences with step `eps` at `point`.
///
/// If a perturbed evaluation flips the sign pattern of any leaky-ReLU input
/// (so the function is not smooth across the stencil), the step is divided
/// by ten, up to four times.
pub fn grad_check<F>(f: F, point: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    const MAX_SHRINK: usize = 4;

    let mut tape = Tape::new().with_finite_check(true);
    let vars: Vec<Var<f64>> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::no_grad();
        tape.enable_kink_probe();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((out.value().item()?, tape.kink_signature().unwrap_or(0)))
    };
    let (_, base_sig) = eval(point)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        shrunk_steps: 0,
    };
    let mut probe: Vec<Tensor<f64>> = point.to_vec();
    for (i, input) in point.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let mut h = eps;
            let mut numeric = 0.0;
            for attempt in 0..=MAX_SHRINK {
                probe[i].data_mut()[j] = x0 + h;
                let (fp, sp) = eval(&probe)?;
                probe[i].data_mut()[j] = x0 - h;
                let (fm, sm) = eval(&probe)?;
                numeric = (fp - fm) / (2.0 * h);
                if (sp == base_sig && sm == base_sig) || attempt == MAX_SHRINK {
                    if attempt > 0 {
                        report.shrunk_steps += 1;
                    }
                    break;
                }
                h /= 10.0;
            }
            probe[i].data_mut()[j] = x0;
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
