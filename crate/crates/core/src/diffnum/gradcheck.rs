//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{Bound, ParamSet};
use crate::error::Result;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    /// Probes that were repeated with a smaller step after straddling a kink.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Retries per probe; each one divides the step by ten.
const KINK_RETRIES: usize = 3;

/// Compares `d loss / d params` from the tape against central differences with
/// step `h`. At most `per_tensor` evenly spaced coordinates of each tensor are
/// probed (all of them when `None`).
///
/// When the second differences at `h` and `h / 2` do not scale quadratically,
/// the interval holds a kink of a piecewise linear op and the probe is
/// repeated with a smaller step.
pub fn check<F>(params: &ParamSet, loss_fn: F, h: f64, per_tensor: Option<usize>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = loss_fn(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let analytic = params.grads(&bound, &grads);

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let l = loss_fn(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let base = eval(params)?;
    let noise = 64.0 * f64::EPSILON * base.abs().max(1.0);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked: 0, kinks: 0 };
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let n = t.len();
        let count = per_tensor.map_or(n, |k| k.min(n));
        for j in 0..count {
            let i = j * n / count;
            let orig = t.data()[i];
            let mut step = h;
            let mut numeric = 0.0;
            let mut pair = |step: f64| -> Result<(f64, f64)> {
                probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
                let up = eval(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
                let down = eval(&probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                Ok((up, down))
            };
            for attempt in 0..=KINK_RETRIES {
                let (up, down) = pair(step)?;
                let (up2, down2) = pair(step / 2.0)?;
                numeric = (up - down) / (2.0 * step);
                // Second differences shrink fourfold per halving on smooth
                // functions but only linearly across a kink.
                let (d2, d2_half) = (up - 2.0 * base + down, up2 - 2.0 * base + down2);
                let kink = (d2 - 4.0 * d2_half).abs() > 1e-3 * d2.abs() + 4.0 * noise;
                if !kink || attempt == KINK_RETRIES {
                    break;
                }
                report.kinks += 1;
                step /= 10.0;
            }
            let err = relative_error(analytic[name].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = format!(
                        "{name}[{i}]: analytic {:.6e}, numeric {numeric:.6e}",
                        analytic[name].data()[i]
                    );
                }
            }
        }
    }
    Ok(report)
}
