//! Test-only helpers: the central finite-difference oracle used by the
//! gradient checks. Nothing here calls into the tape's backward pass.
#![allow(dead_code)]

pub mod oracles;

use ctcn_core::nn::Parameters;
use ctcn_core::rng;
use ctcn_core::tensor::{Tape, Tensor, Var};

/// Relative error `‖a − f‖ / (‖f‖ + 1e-8)` between two gradient buffers.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|f| f * f).sum::<f64>().sqrt();
    diff / (norm + 1e-8)
}

/// Central differences of a scalar function of several tensors with respect
/// to input `which`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize, h: f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let up = f(&work);
            work[which].data_mut()[i] = orig - h;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Runs `build` on a fresh tape with every input as a trainable leaf,
/// back-propagates, and compares each input gradient with central
/// differences. Returns the worst relative error.
pub fn grad_check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let eval = |ts: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let numeric = numeric_grad(&eval, inputs, k, 1e-5);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum with fixed pseudo-random weights, so the loss is sensitive
/// to every output element (a plain sum hides errors that cancel).
pub fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
    let n = tape.value(v).len();
    let shape = tape.shape(v).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0 + 0.05).collect();
    let wv = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(v, wv).unwrap();
    tape.sum(p)
}

/// Gradient check over every parameter of a model. `loss` builds the scalar
/// loss on a fresh tape, binding `params` as trainable leaves when asked,
/// and returns it with the bound vars in visiting order.
pub fn param_grad_check<P: Parameters + Clone>(params: &P, loss: impl Fn(&P, &mut Tape, bool) -> (Var, Vec<Var>)) -> f64 {
    let mut tape = Tape::new();
    let (out, vars) = loss(params, &mut tape, true);
    tape.backward(out).unwrap();
    let mut analytic = Vec::new();
    let mut k = 0;
    params.visit(&mut |_, t| {
        match tape.grad(vars[k]) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
        k += 1;
    });
    let eval = |p: &P| {
        let mut tape = Tape::new();
        let (out, _) = loss(p, &mut tape, false);
        tape.value(out).item().unwrap()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let total = analytic.len();
    let h = 1e-5;
    for i in 0..total {
        let nudge = |delta: f64| {
            let mut p = params.clone();
            let mut seen = 0;
            p.visit_mut(&mut |_, t| {
                if i >= seen && i < seen + t.len() {
                    t.data_mut()[i - seen] += delta;
                }
                seen += t.len();
            });
            eval(&p)
        };
        numeric.push((nudge(h) - nudge(-h)) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

/// Parameters with non-trivial norms and biases, so no gradient is zero by
/// construction.
pub fn jitter<P: Parameters>(p: &mut P, seed: u64) {
    let mut r = rng::stream(seed, "jitter", 0);
    p.visit_mut(&mut |_, t| {
        let noise = Tensor::uniform(t.shape(), -0.3, 0.3, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    });
}
