//! Central finite-difference gradient checking.
//!
//! The harness compares analytic gradients (already accumulated in a
//! [`ParamStore`] by a backward pass) against central differences of a loss
//! closure, component by component. The relative-error metric is
//! |a − f| / max(|a|, |f|), with an absolute fallback when both sides are
//! essentially zero so that quiescent parameters (e.g. behind a dead relu)
//! do not produce 0/0 noise.

use crate::error::Result;
use crate::tensor::ParamStore;

/// Default perturbation step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub name: String,
    pub components: usize,
    /// Largest |analytic − numeric| over components.
    pub max_abs_diff: f64,
    /// Largest relative error over components (0 when both sides vanish).
    pub max_rel_err: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub passed: bool,
}

/// Full report over a parameter store.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub items: Vec<GradCheckItem>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    /// One line per checked tensor, suitable for a report file.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        for item in &self.items {
            s.push_str(&format!(
                "{:<40} components={:<6} max_rel_err={:.3e} max_abs_diff={:.3e} {}\n",
                item.name,
                item.components,
                item.max_rel_err,
                item.max_abs_diff,
                if item.passed { "ok" } else { "FAILED" }
            ));
        }
        s
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-7 {
        // Both effectively zero: treat |a − f| directly, scaled so that the
        // usual tolerances apply (1e-9 disagreement ≈ 1e-4 reported).
        (analytic - numeric).abs() * 1e5
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Checks every component of every parameter in `store` against central
/// finite differences of `loss`.
///
/// The store must already hold analytic gradients for the same loss (run the
/// forward/backward first, without zeroing). `loss` is evaluated with
/// perturbed copies of the store; it must be a pure function of the
/// parameter values.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut probe = store.clone();
    let mut items = Vec::new();
    let names: Vec<String> = store.names().to_vec();
    for name in &names {
        let analytic: Vec<f64> = store
            .get(name)
            .and_then(|t| t.grad())
            .map(|g| g.to_vec())
            .unwrap_or_default();
        let n = store.get(name).map(|t| t.len()).unwrap_or(0);
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        for j in 0..n {
            let original = probe.get(name).unwrap().data()[j];
            probe.get_mut(name).unwrap().data_mut()[j] = original + step;
            let up = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = original - step;
            let down = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(j).copied().unwrap_or(0.0);
            let abs = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            if rel > max_rel {
                max_rel = rel;
                worst = j;
            }
            max_abs = max_abs.max(abs);
        }
        items.push(GradCheckItem {
            name: name.clone(),
            components: n,
            max_abs_diff: max_abs,
            max_rel_err: max_rel,
            worst_index: worst,
            passed: max_rel <= tolerance,
        });
    }
    Ok(GradCheckReport {
        items,
        tolerance,
        step,
    })
}

/// Runs forward + backward for `forward` once to obtain analytic gradients,
/// then checks them against central differences of the same closure.
pub fn check_tape_function<F>(
    mut store: ParamStore,
    forward: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut crate::tensor::tape::Tape, &ParamStore) -> Result<crate::tensor::tape::Val>,
{
    let mut tape = crate::tensor::tape::Tape::new();
    let loss = forward(&mut tape, &store)?;
    tape.backward(loss, &mut store)?;
    let loss_fn = |s: &ParamStore| -> Result<f64> {
        let mut t = crate::tensor::tape::Tape::new();
        let v = forward(&mut t, s)?;
        t.scalar_value(v)
    };
    check_gradients(&store, loss_fn, step, tolerance)
}

/// Finite-difference checks for every primitive the tape provides, with
/// randomized inputs drawn from `seed`. Returns one combined report whose
/// item names identify the operation under test.
pub fn layer_suite(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    use crate::rng::indexed_substream;
    use crate::tensor::tape::{Tape, Val};
    use crate::tensor::Tensor;
    use rand::Rng;

    let mut items: Vec<GradCheckItem> = Vec::new();
    let mut run = |name: &str,
                   params: Vec<(&str, Tensor)>,
                   forward: &dyn Fn(&mut Tape, &ParamStore) -> Result<Val>|
     -> Result<()> {
        let mut store = ParamStore::new();
        for (n, t) in params {
            store.insert(n, t)?;
        }
        let report = check_tape_function(store, forward, DEFAULT_STEP, tolerance)?;
        for mut item in report.items {
            item.name = format!("{name}.{}", item.name);
            items.push(item);
        }
        Ok(())
    };

    // Random tensors. Relu inputs are kept away from the kink at zero and
    // ln/rsqrt inputs away from zero, where central differences are invalid.
    let mut rng = indexed_substream(seed, "gradcheck-layers", 0);
    let rand_vec = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let offset_vec = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.3..1.3)
            })
            .collect()
    };
    let positive_vec = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.5..2.0)).collect()
    };

    // matmul, transpose
    let a = Tensor::new(vec![3, 4], rand_vec(&mut rng, 12))?;
    let b = Tensor::new(vec![4, 2], rand_vec(&mut rng, 8))?;
    run("matmul", vec![("a", a), ("b", b)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        let c = tape.matmul(a, b)?;
        let t = tape.tanh(c);
        Ok(tape.sum(t))
    })?;

    let a = Tensor::new(vec![2, 5], rand_vec(&mut rng, 10))?;
    run("transpose", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let t = tape.transpose(a)?;
        let sq = tape.mul(t, t)?;
        Ok(tape.sum(sq))
    })?;

    // elementwise binary, including scalar broadcasting
    let a = Tensor::from_vec(rand_vec(&mut rng, 6));
    let b = Tensor::from_vec(rand_vec(&mut rng, 6));
    let s1 = Tensor::scalar(rng.gen_range(0.5..1.5));
    run(
        "elementwise",
        vec![("a", a), ("b", b), ("s", s1)],
        &|tape, st| {
            let a = tape.param(st, "a")?;
            let b = tape.param(st, "b")?;
            let s = tape.param(st, "s")?;
            let sum = tape.add(a, b)?;
            let diff = tape.sub(a, b)?;
            let prod = tape.mul(sum, diff)?;
            let scaled = tape.mul(prod, s)?; // tensor × scalar broadcast
            let shifted = tape.add(s, scaled)?; // scalar + tensor broadcast
            let down = tape.sub(shifted, s)?; // tensor − scalar broadcast
            let t = tape.tanh(down);
            Ok(tape.sum(t))
        },
    )?;

    // scale / add_const
    let a = Tensor::from_vec(rand_vec(&mut rng, 5));
    run("affine_const", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let y = tape.scale(a, -1.7);
        let z = tape.add_const(y, 0.4);
        let t = tape.tanh(z);
        Ok(tape.sum(t))
    })?;

    // unary nonlinearities
    let a = Tensor::from_vec(rand_vec(&mut rng, 6));
    run("tanh", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let t = tape.tanh(a);
        let sq = tape.mul(t, t)?;
        Ok(tape.sum(sq))
    })?;

    let a = Tensor::from_vec(offset_vec(&mut rng, 6));
    run("relu", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let r = tape.relu(a);
        let sq = tape.mul(r, r)?;
        Ok(tape.sum(sq))
    })?;

    let a = Tensor::from_vec(rand_vec(&mut rng, 6));
    run("exp", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let e = tape.exp(a);
        Ok(tape.sum(e))
    })?;

    let a = Tensor::from_vec(positive_vec(&mut rng, 6));
    run("ln", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let l = tape.ln(a);
        Ok(tape.sum(l))
    })?;

    let a = Tensor::from_vec(positive_vec(&mut rng, 6));
    run("rsqrt", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let r = tape.rsqrt(a);
        Ok(tape.sum(r))
    })?;

    let a = Tensor::from_vec(rand_vec(&mut rng, 6));
    run("sigmoid", vec![("a", a)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let y = tape.sigmoid(a);
        let sq = tape.mul(y, y)?;
        Ok(tape.sum(sq))
    })?;

    // add_bias
    let x = Tensor::new(vec![3, 4], rand_vec(&mut rng, 12))?;
    let bias = Tensor::from_vec(rand_vec(&mut rng, 4));
    run("add_bias", vec![("x", x), ("b", bias)], &|tape, s| {
        let x = tape.param(s, "x")?;
        let b = tape.param(s, "b")?;
        let y = tape.add_bias(x, b)?;
        let t = tape.tanh(y);
        Ok(tape.sum(t))
    })?;

    // softmax, probed through a random linear functional so every lane
    // entry contributes a distinct gradient
    let x = Tensor::from_vec(rand_vec(&mut rng, 6));
    let c = Tensor::from_vec(rand_vec(&mut rng, 6));
    let c_leaf = c.clone();
    run("softmax_vec", vec![("x", x)], &{
        let c_leaf = c_leaf.clone();
        move |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, "x")?;
            let y = tape.softmax(x, 0)?;
            let c = tape.leaf(&c_leaf);
            let w = tape.mul(y, c)?;
            Ok(tape.sum(w))
        }
    })?;

    let x = Tensor::new(vec![2, 4], rand_vec(&mut rng, 8))?;
    let c = Tensor::new(vec![2, 4], rand_vec(&mut rng, 8))?;
    run("softmax_rows", vec![("x", x)], &{
        let c = c.clone();
        move |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, "x")?;
            let y = tape.softmax(x, 1)?;
            let cl = tape.leaf(&c);
            let w = tape.mul(y, cl)?;
            Ok(tape.sum(w))
        }
    })?;

    // softmax under an additive −inf mask: masked inputs must get zero
    // gradient, matching finite differences exactly.
    let x = Tensor::from_vec(rand_vec(&mut rng, 5));
    let probe = Tensor::from_vec(rand_vec(&mut rng, 5));
    run("softmax_masked", vec![("x", x)], &{
        let probe = probe.clone();
        move |tape: &mut Tape, s: &ParamStore| {
            let x = tape.param(s, "x")?;
            let mask = tape.leaf(&Tensor::from_vec(vec![
                0.0,
                0.0,
                f64::NEG_INFINITY,
                0.0,
                f64::NEG_INFINITY,
            ]));
            let masked = tape.add(x, mask)?;
            let y = tape.softmax(masked, 0)?;
            let p = tape.leaf(&probe);
            let w = tape.mul(y, p)?;
            Ok(tape.sum(w))
        }
    })?;

    // layer_norm with learned gain and bias
    let x = Tensor::new(vec![2, 5], rand_vec(&mut rng, 10))?;
    let g = Tensor::from_vec(positive_vec(&mut rng, 5));
    let bi = Tensor::from_vec(rand_vec(&mut rng, 5));
    let probe = Tensor::new(vec![2, 5], rand_vec(&mut rng, 10))?;
    run(
        "layer_norm",
        vec![("x", x), ("g", g), ("b", bi)],
        &{
            let probe = probe.clone();
            move |tape: &mut Tape, s: &ParamStore| {
                let x = tape.param(s, "x")?;
                let g = tape.param(s, "g")?;
                let b = tape.param(s, "b")?;
                let y = tape.layer_norm(x, g, b, 1e-5)?;
                let p = tape.leaf(&probe);
                let w = tape.mul(y, p)?;
                Ok(tape.sum(w))
            }
        },
    )?;

    // concat + mean reduction
    let a = Tensor::new(vec![1, 3], rand_vec(&mut rng, 3))?;
    let b = Tensor::new(vec![1, 2], rand_vec(&mut rng, 2))?;
    run("concat_mean", vec![("a", a), ("b", b)], &|tape, s| {
        let a = tape.param(s, "a")?;
        let b = tape.param(s, "b")?;
        let c = tape.concat(&[a, b])?;
        let t = tape.tanh(c);
        Ok(tape.mean(t))
    })?;

    Ok(GradCheckReport {
        items,
        tolerance,
        step: DEFAULT_STEP,
    })
}
