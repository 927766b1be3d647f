//! Central finite-difference checking of tape gradients.
//!
//! The oracle only relies on repeated forward evaluation, so it stays
//! independent of the reverse-sweep code it validates.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;

/// Max elementwise relative error between analytic and finite-difference
/// gradients of a scalar-valued graph over the given inputs.
///
/// `build` must construct the same graph each call from leaves recorded in
/// input order and return the scalar output.
pub fn max_rel_error<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |tensors: &[Tensor]| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, out, vars))
    };

    let (mut tape, out, vars) = run(inputs)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = tape
            .grad(vars[ti])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] += FD_STEP;
            let (tp, op, _) = run(&plus)?;
            let fp = tp.scalar_value(op);

            let mut minus = inputs.to_vec();
            minus[ti].data[ei] -= FD_STEP;
            let (tm, om, _) = run(&minus)?;
            let fm = tm.scalar_value(om);

            let fd = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[ei];
            let rel = (a - fd).abs() / (a.abs().max(fd.abs()) + 1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
