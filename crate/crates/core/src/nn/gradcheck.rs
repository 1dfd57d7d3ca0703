//! Central finite-difference verification of analytic gradients.

use super::optim::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Finite-difference step on f32 parameters.
pub const FD_STEP: f32 = 1e-3;

/// At most this many coordinates are probed per parameter; larger tensors
/// are strided deterministically.
pub const MAX_PROBED_COORDS: usize = 256;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub param: String,
    pub max_rel_err: f32,
    pub coords_checked: usize,
    pub tolerance: f32,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck {}: max rel err {:.3e} over {} coords (tol {:.1e}) -> {}",
            self.param,
            self.max_rel_err,
            self.coords_checked,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Compare the tape gradient of `loss_fn` w.r.t. `probe` against central
/// differences. `loss_fn` must be deterministic (fixed noise inputs); this is
/// verified by evaluating it twice before any differencing.
///
/// The error metric is |analytic − numeric| / (1 + max(|analytic|, |numeric|)),
/// i.e. relative error with a unit absolute floor, which keeps near-zero
/// gradient coordinates from amplifying f32 round-off into false alarms.
pub fn gradcheck<F>(
    store: &ParameterStore,
    probe: &str,
    tolerance: f32,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<f32> {
        let mut tape = Tape::new();
        let root = loss_fn(s, &mut tape)?;
        Ok(tape.scalar(root))
    };

    let l1 = eval(store)?;
    let l2 = eval(store)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Config(format!(
            "gradcheck aborted: loss_fn is non-deterministic ({l1} vs {l2}); \
             fix the noise inputs before differencing"
        )));
    }

    // analytic gradient
    let mut tape = Tape::new();
    let root = loss_fn(store, &mut tape)?;
    tape.backward(root);
    let mut grad_store = store.clone();
    grad_store.zero_grads();
    tape.accumulate_param_grads(&mut grad_store, 1.0);
    let analytic = grad_store.grad(probe).clone();

    let len = analytic.len();
    let stride = len.div_ceil(MAX_PROBED_COORDS).max(1);
    let mut max_rel = 0.0f32;
    let mut checked = 0usize;
    let mut perturbed = store.clone();
    for i in (0..len).step_by(stride) {
        let original = perturbed.value(probe).data[i];
        perturbed.value_mut(probe).data[i] = original + FD_STEP;
        let plus = eval(&perturbed)?;
        perturbed.value_mut(probe).data[i] = original - FD_STEP;
        let minus = eval(&perturbed)?;
        perturbed.value_mut(probe).data[i] = original;

        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }

    Ok(GradCheckReport {
        param: probe.to_string(),
        max_rel_err: max_rel,
        coords_checked: checked,
        tolerance,
    })
}

/// Run `gradcheck` over every parameter in the store and return the worst report.
pub fn gradcheck_all<F>(
    store: &ParameterStore,
    tolerance: f32,
    loss_fn: F,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    names
        .iter()
        .map(|n| gradcheck(store, n, tolerance, &loss_fn))
        .collect()
}
