//! Central finite-difference checks of tape gradients.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Largest relative error of each checked parameter, in store order.
    pub by_param: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Entries checked per parameter, evenly spaced; 0 checks all.
    pub per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            per_param: 0,
        }
    }
}

fn sample(len: usize, k: usize) -> Vec<usize> {
    if k == 0 || k >= len {
        (0..len).collect()
    } else {
        (0..k).map(|i| i * len / k).collect()
    }
}

/// Compares the gradient of the scalar `f` with respect to every parameter
/// of `store` against central differences.
pub fn check_params<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false);
        let out = f(&mut tape, &p)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let out = f(&mut tape, &p)?;
    let mut grads = tape.backward(out);
    let analytic: Vec<_> = p.vars.iter().map(|&v| grads.take(v)).collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        by_param: Vec::new(),
    };
    let mut probe = store.clone();
    for (id, name, value) in store.iter() {
        let mut param_max = 0.0f64;
        for k in sample(value.data.len(), opts.per_param) {
            let orig = value.data[k];
            probe.get_mut(id).data[k] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(id).data[k] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data[k]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if !(rel <= param_max) {
                param_max = rel;
            }
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), k));
            }
        }
        report.by_param.push((name.to_string(), param_max));
    }
    Ok(report)
}
