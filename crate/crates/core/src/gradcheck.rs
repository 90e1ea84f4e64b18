//! Central-difference validation of the tape's backward rules.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Compare an analytic gradient against central differences of a pure
/// scalar evaluation. Returns the max over elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
pub fn compare_against_numeric(
    analytic: &[f64],
    eval: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    if analytic.len() != x.numel() {
        return Err(Error::Dim(
            "analytic gradient length does not match the probed tensor".into(),
        ));
    }
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Run a tensor-to-scalar function through the tape, then probe every
/// element of `x` with step `h`. `f` must be deterministic; the harness
/// cannot detect a stochastic function, it just returns garbage for one.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Range(format!("grad_check step {h} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xid)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage("grad_check needs a scalar-valued function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> = tape
        .grad(xid)
        .expect("requires_grad leaf must receive a gradient")
        .to_vec();
    compare_against_numeric(
        &analytic,
        |probe: &Tensor| {
            let mut t = Tape::new();
            let id = t.constant(probe.clone());
            let o = f(&mut t, id)?;
            Ok(t.value(o).item())
        },
        x,
        h,
    )
}
