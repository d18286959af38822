//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use maskvid::{Graph, Tensor, Var};

/// Central-difference step used by every gradient oracle.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator. Below it a gradient entry is
/// compared in absolute terms (the central difference itself carries about
/// 1e-10 of truncation and rounding noise at this step size).
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks analytic gradients of `f` against central differences for every
/// element of every input. Returns the worst relative error.
pub fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad(*v).unwrap()).collect();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[ti].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[ti].data()[i], numeric));
        }
    }
    worst
}

/// Scalarizes an output with a fixed quadratic readout. The target is offset
/// so residuals stay far from zero and no gradient entry cancels.
pub fn readout(g: &mut Graph, out: Var) -> Var {
    let shape = g.value(out).shape().to_vec();
    let target = Tensor::from_fn(&shape, |i| 3.0 + ((i as f64) * 0.618).sin());
    let t = g.constant(target);
    g.mse_mean(out, t).unwrap()
}
