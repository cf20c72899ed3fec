use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{ConvParams, Graph, Var};
use crate::tensor::Tensor;

/// Errors below this magnitude are measured against it instead of the
/// gradient itself, so near-zero entries do not blow up the ratio.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per input, in input order.
    pub per_input: Vec<(String, f64)>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the function on a fresh graph from one leaf per input.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor<f64>)], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0f64;

    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut worst = 0.0f64;
        for i in 0..t.numel() {
            let a = analytic.data()[i];
            if !a.is_finite() {
                return Err(TensorError::NonFinite { name: name.to_string(), index: i });
            }
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + eps;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - eps;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { name: name.to_string(), index: i });
            }
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error = max_rel_error.max(worst);
        per_input.push((name.to_string(), worst));
    }
    Ok(GradCheckReport { max_rel_error, per_input })
}

/// Ops exercised by [`random_suite`], one family per case in rotation.
pub const SUITE_OPS: [&str; 10] = [
    "conv2d",
    "linear",
    "add_sub_mul",
    "sigmoid_tanh",
    "relu_abs",
    "square_scale_shift",
    "sum_mean",
    "upsample_nearest2x",
    "reshape_slice_flat",
    "mae_mse",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub op: &'static str,
    pub shapes: String,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in [0.1, 1], so kinks at zero stay out of the
/// finite-difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(r.clone());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Gradient checks on `cases` randomly shaped instances of every op family.
pub fn random_suite(cases: usize, seed: u64) -> Result<Vec<SuiteCase>> {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for case in 0..cases {
        let op = SUITE_OPS[case % SUITE_OPS.len()];
        let n = rng.random_range(1..=2);
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5));
        let x = uniform(&mut rng, &[n, c, h, w]);
        let (report, shapes) = match op {
            "conv2d" => {
                let k = if rng.random::<bool>() { 3 } else { 1 };
                let stride = rng.random_range(1..=2);
                let padding = if k == 3 { rng.random_range(0..=1) } else { 0 };
                let (h, w) = (h.max(3), w.max(3));
                let x = uniform(&mut rng, &[n, c, h, w]);
                let depthwise = c > 1 && rng.random::<bool>();
                let (oc, groups) = if depthwise { (c, c) } else { (rng.random_range(1..=3), 1) };
                let wt = uniform(&mut rng, &[oc, c / groups, k, k]);
                let b = uniform(&mut rng, &[oc]);
                let p = ConvParams::new(stride, padding).grouped(groups);
                let probe = {
                    let mut g = Graph::new();
                    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(wt.clone()), g.constant(b.clone()));
                    let y = g.conv2d(xv, wv, Some(bv), p)?;
                    g.shape(y).to_vec()
                };
                let r = uniform(&mut rng, &probe);
                let shapes = format!("x{:?} w{:?} s{stride} p{padding} g{groups}", x.shape(), wt.shape());
                let rep = grad_check(
                    |g, v| {
                        let y = g.conv2d(v[0], v[1], Some(v[2]), p)?;
                        weighted_sum(g, y, &r)
                    },
                    &[("x", x), ("w", wt), ("b", b)],
                    EPS,
                )?;
                (rep, shapes)
            }
            "linear" => {
                let (rows, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
                let (xi, wt, b) = (uniform(&mut rng, &[rows, i]), uniform(&mut rng, &[o, i]), uniform(&mut rng, &[o]));
                let r = uniform(&mut rng, &[rows, o]);
                let shapes = format!("x[{rows}, {i}] w[{o}, {i}]");
                let rep = grad_check(
                    |g, v| {
                        let y = g.linear(v[0], v[1], Some(v[2]))?;
                        weighted_sum(g, y, &r)
                    },
                    &[("x", xi), ("w", wt), ("b", b)],
                    EPS,
                )?;
                (rep, shapes)
            }
            "add_sub_mul" | "mae_mse" | "relu_abs" => {
                let y = if op == "add_sub_mul" { uniform(&mut rng, x.shape()) } else { off_zero(&mut rng, x.shape()) };
                let x = if op == "add_sub_mul" { x } else { off_zero(&mut rng, x.shape()) };
                // Shifting one operand keeps x - y away from zero for the MAE kink.
                let y = if op == "mae_mse" { y.map(|v| v + 3.0) } else { y };
                let r = uniform(&mut rng, x.shape());
                let shapes = format!("{:?}", x.shape());
                let rep = grad_check(
                    |g, v| match op {
                        "add_sub_mul" => {
                            let s = g.add(v[0], v[1])?;
                            let d = g.sub(v[0], v[1])?;
                            let m = g.mul(s, d)?;
                            weighted_sum(g, m, &r)
                        }
                        "relu_abs" => {
                            let a = g.relu(v[0]);
                            let b = g.abs(v[1]);
                            let s = g.add(a, b)?;
                            weighted_sum(g, s, &r)
                        }
                        _ => {
                            let a = g.mae(v[0], v[1])?;
                            let b = g.mse(v[0], v[1])?;
                            g.add(a, b)
                        }
                    },
                    &[("a", x), ("b", y)],
                    EPS,
                )?;
                (rep, shapes)
            }
            _ => {
                let r_up = uniform(&mut rng, &[n, c, 2 * h, 2 * w]);
                let r = uniform(&mut rng, x.shape());
                let len = rng.random_range(1..=x.numel());
                let start = rng.random_range(0..=x.numel() - len);
                let r_slice = uniform(&mut rng, &[len]);
                let shift = rng.random_range(-1.0..1.0);
                let shapes = format!("{:?}", x.shape());
                let rep = grad_check(
                    |g, v| match op {
                        "sigmoid_tanh" => {
                            let s = g.sigmoid(v[0]);
                            let t = g.tanh(s);
                            weighted_sum(g, t, &r)
                        }
                        "square_scale_shift" => {
                            let s = g.square(v[0]);
                            let s = g.scale(s, 0.75);
                            let s = g.add_scalar(s, shift);
                            weighted_sum(g, s, &r)
                        }
                        "sum_mean" => {
                            let p = weighted_sum(g, v[0], &r)?;
                            let sq = g.square(v[0]);
                            let m = g.mean(sq);
                            let s = g.sum(sq);
                            let t = g.add(p, m)?;
                            g.add(t, s)
                        }
                        "upsample_nearest2x" => {
                            let u = g.upsample_nearest2x(v[0])?;
                            weighted_sum(g, u, &r_up)
                        }
                        _ => {
                            let flat = g.reshape(v[0], &[v_numel(g, v[0])])?;
                            let s = g.slice_flat(flat, start, &[len])?;
                            weighted_sum(g, s, &r_slice)
                        }
                    },
                    &[("x", x)],
                    EPS,
                )?;
                (rep, shapes)
            }
        };
        out.push(SuiteCase { op, shapes, max_rel_error: report.max_rel_error });
    }
    Ok(out)
}

fn v_numel(g: &Graph<f64>, v: Var) -> usize {
    g.shape(v).iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_suite_passes() {
        let cases = random_suite(50, 17).unwrap();
        assert_eq!(cases.len(), 50);
        for op in SUITE_OPS {
            assert_eq!(cases.iter().filter(|c| c.op == op).count(), 5);
        }
        for c in &cases {
            assert!(c.max_rel_error < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[("x", x)],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn non_finite_gradient_names_input() {
        let x = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &[("weights", x)],
            1e-5,
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFinite { name: "weights".into(), index: 0 });
    }
}
