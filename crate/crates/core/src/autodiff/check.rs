use alloc::vec::Vec;

use crate::Result;

use super::{NodeId, Tape};

const FD_STEP: f64 = 1e-3;
const REL_FLOOR: f64 = 1e-2;

/// Outcome of a finite-difference gradient check. Failures are reported,
/// never thrown.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// finite differences (step 1e-3, evaluated in 64-bit).
///
/// `build` receives a fresh tape plus one leaf node per entry of `leaves`
/// (given as `(rows, cols, data)`) and must return the scalar output node.
/// The relative error uses `|a-b| / max(|a|, |b|, 0.01)` so that near-zero
/// coordinates are judged on an absolute scale.
pub fn grad_check<F>(leaves: &[(usize, usize, Vec<f64>)], tol: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves
            .iter()
            .zip(values)
            .map(|(&(r, c, _), v)| tape.leaf(r, c, v.clone()))
            .collect();
        let out = build(&mut tape, &ids)?;
        Ok(tape.scalar(out))
    };

    // reverse-mode gradients at the base point
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|(r, c, v)| tape.leaf(*r, *c, v.clone()))
        .collect();
    let out = build(&mut tape, &ids)?;
    tape.backward(out)?;
    let reverse: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let base: Vec<Vec<f64>> = leaves.iter().map(|(_, _, v)| v.clone()).collect();
    let mut max_rel_err = 0.0f64;
    let mut checked = 0;
    for (li, leaf) in base.iter().enumerate() {
        for ci in 0..leaf.len() {
            let mut plus = base.clone();
            plus[li][ci] += FD_STEP;
            let mut minus = base.clone();
            minus[li][ci] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let ad = reverse[li][ci];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        pass: max_rel_err <= tol,
    })
}
