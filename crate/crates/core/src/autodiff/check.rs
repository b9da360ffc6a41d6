//! Gradient validation harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Compares backward gradients against central finite differences.
///
/// `f` receives fresh leaves for `inputs` and must return a scalar. The result
/// is the maximum over all input coordinates of `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let eval = |xs: &[Array]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (n, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").data().to_vec();
        for k in 0..inputs[n].numel() {
            let orig = inputs[n].data()[k];
            probe[n].data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe[n].data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe[n].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::new(shape.to_vec(), data).expect("finite draws")
}

type OpFn = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Runs `op` under a random linear read-out on ten random draws and returns
/// the worst relative gradient error.
fn check_primitive(op: &OpFn, shapes: &[&[usize]], lo: f64, hi: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let inputs: Vec<Array> = shapes.iter().map(|s| uniform(&mut rng, s, lo, hi)).collect();
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
            let out = op(&mut g, &vars).expect("primitive evaluates");
            g.shape(out).to_vec()
        };
        let readout = uniform(&mut rng, &out_shape, -1.0, 1.0);
        let err = grad_check(
            |g, v| {
                let y = op(g, v)?;
                let w = g.constant(readout.clone());
                let p = g.mul(y, w)?;
                g.sum_all(p)
            },
            &inputs,
            1e-5,
        )
        .expect("primitive evaluates");
        worst = worst.max(err);
    }
    worst
}

/// Worst gradient-check error of every primitive, each on ten random draws in
/// [-2, 2] unless its domain is narrower.
pub fn primitive_report() -> Vec<(&'static str, f64)> {
    let s23: &[usize] = &[2, 3];
    let s3: &[usize] = &[3];
    let s234: &[usize] = &[2, 3, 4];
    let mut results = Vec::new();
    let mut run = |name: &'static str, op: &OpFn, shapes: &[&[usize]], lo: f64, hi: f64| {
        let seed = results.len() as u64 + 100;
        results.push((name, check_primitive(op, shapes, lo, hi, seed)));
    };
    run("add", &|g, v| g.add(v[0], v[1]), &[s23, s23], -2.0, 2.0);
    run("add_trailing", &|g, v| g.add(v[0], v[1]), &[s234, &[3, 4]], -2.0, 2.0);
    run("add_scalar_operand", &|g, v| g.add(v[0], v[1]), &[s23, &[]], -2.0, 2.0);
    run("sub", &|g, v| g.sub(v[0], v[1]), &[s3, s23], -2.0, 2.0);
    run("mul", &|g, v| g.mul(v[0], v[1]), &[s23, s3], -2.0, 2.0);
    run(
        "div",
        &|g, v| {
            let d = g.add_scalar(v[1], 3.0)?;
            g.div(v[0], d)
        },
        &[s23, s23],
        -2.0,
        2.0,
    );
    run("scale", &|g, v| g.scale(v[0], -1.7), &[s23], -2.0, 2.0);
    run("add_scalar", &|g, v| g.add_scalar(v[0], 0.4), &[s23], -2.0, 2.0);
    run("neg", &|g, v| g.neg(v[0]), &[s23], -2.0, 2.0);
    run("exp", &|g, v| g.exp(v[0]), &[s23], -2.0, 2.0);
    run("log", &|g, v| g.log(v[0]), &[s23], 0.1, 2.0);
    run("tanh", &|g, v| g.tanh(v[0]), &[s23], -2.0, 2.0);
    run("sigmoid", &|g, v| g.sigmoid(v[0]), &[s23], -2.0, 2.0);
    run("relu", &|g, v| g.relu(v[0]), &[s23], -2.0, 2.0);
    run("elu", &|g, v| g.elu(v[0]), &[s23], -2.0, 2.0);
    run("sqrt", &|g, v| g.sqrt(v[0]), &[s23], 0.1, 2.0);
    run("square", &|g, v| g.square(v[0]), &[s23], -2.0, 2.0);
    run("matmul", &|g, v| g.matmul(v[0], v[1]), &[s234, &[4, 2]], -2.0, 2.0);
    run("bmm", &|g, v| g.bmm(v[0], v[1]), &[s234, &[2, 4, 5]], -2.0, 2.0);
    run("transpose", &|g, v| g.transpose(v[0]), &[s234], -2.0, 2.0);
    run("softmax_last", &|g, v| g.softmax(v[0], 2), &[s234], -2.0, 2.0);
    run("softmax_mid", &|g, v| g.softmax(v[0], 1), &[s234], -2.0, 2.0);
    run("sum_axis", &|g, v| g.sum(v[0], 1), &[s234], -2.0, 2.0);
    run("mean_axis", &|g, v| g.mean(v[0], 0), &[s234], -2.0, 2.0);
    run("sum_all", &|g, v| g.sum_all(v[0]), &[s23], -2.0, 2.0);
    run("mean_all", &|g, v| g.mean_all(v[0]), &[s23], -2.0, 2.0);
    run("concat", &|g, v| g.concat(&[v[0], v[1]], 1), &[s234, &[2, 2, 4]], -2.0, 2.0);
    run("slice", &|g, v| g.slice(v[0], 2, 1, 3), &[s234], -2.0, 2.0);
    run("reshape", &|g, v| g.reshape(v[0], &[6, 4]), &[s234], -2.0, 2.0);
    run("broadcast", &|g, v| g.broadcast(v[0], 1, 3), &[&[2, 4]], -2.0, 2.0);
    run(
        "layer_norm",
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        &[s234, &[4], &[4]],
        -2.0,
        2.0,
    );
    run(
        "lstm",
        &|g, v| g.lstm(v[0], v[1], v[2], v[3]),
        &[&[2, 5, 2], &[2, 12], &[3, 12], &[12]],
        -2.0,
        2.0,
    );
    results
}

