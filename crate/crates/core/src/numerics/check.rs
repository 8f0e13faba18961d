//! Central finite differences, used to validate the analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Gradient magnitudes below this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates left out because `±h` crossed an activation kink.
    pub skipped: usize,
}

/// Builds the scalar `build(graph, leaves)` once analytically and then
/// perturbs up to `max_coords` coordinates of every input by `±h`.
/// Coordinates are spread evenly across each tensor.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, max_coords: usize, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let n = inputs[ti].len();
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = (n / max_coords.max(1)).max(1);
        for j in (0..n).step_by(stride).take(max_coords) {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j], numeric, RELATIVE_FLOOR));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        checked,
        skipped: 0,
    })
}

fn random_tensor(shape: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor {
    let n = shape.iter().product();
    // Keep values away from the ReLU kink so ±h never crosses it.
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Contracts an arbitrary output with fixed random weights so every output
/// coordinate contributes to the scalar.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(g.shape(out).to_vec(), &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Finite-difference check of every differentiable op in isolation.
pub fn op_gradient_suite(h: f64, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| random_tensor(shape.to_vec(), &mut rng);
    let coords = 24;
    let mut results = Vec::new();

    macro_rules! case {
        ($name:expr, [$($shape:expr),*], |$g:ident, $v:ident| $body:expr) => {{
            let inputs = vec![$(t(&$shape)),*];
            let r = gradient_check(&inputs, h, coords, |$g: &mut Graph, $v: &[Var]| {
                let out = $body?;
                project($g, out, 99)
            })?;
            results.push(($name, r));
        }};
    }

    case!("add", [[3, 4], [3, 4]], |g, v| g.add(v[0], v[1]));
    case!("sub", [[3, 4], [3, 4]], |g, v| g.sub(v[0], v[1]));
    case!("mul", [[3, 4], [3, 4]], |g, v| g.mul(v[0], v[1]));
    case!("scale", [[5]], |g, v| Ok::<_, crate::Error>(g.scale(v[0], -1.7)));
    case!("add_row_bias", [[2, 3, 4], [4]], |g, v| g.add_row_bias(v[0], v[1]));
    case!("matmul", [[3, 5], [5, 2]], |g, v| g.matmul(v[0], v[1]));
    case!("linear", [[4, 5], [5, 3], [3]], |g, v| g.linear(v[0], v[1], v[2]));
    case!("relu", [[4, 6]], |g, v| Ok::<_, crate::Error>(g.relu(v[0])));
    case!("leaky_relu", [[4, 6]], |g, v| Ok::<_, crate::Error>(
        g.leaky_relu(v[0], 0.01)
    ));
    case!("sigmoid", [[4, 6]], |g, v| Ok::<_, crate::Error>(g.sigmoid(v[0])));
    case!("tanh", [[4, 6]], |g, v| Ok::<_, crate::Error>(g.tanh(v[0])));
    case!("conv2d_s1p1", [[2, 3, 6, 6], [4, 3, 3, 3]], |g, v| g
        .conv2d(v[0], v[1], 1, 1));
    case!("conv2d_s2p1", [[2, 3, 7, 7], [4, 3, 3, 3]], |g, v| g
        .conv2d(v[0], v[1], 2, 1));
    case!("depthwise_s1", [[2, 3, 6, 6], [3, 1, 3, 3]], |g, v| g
        .depthwise_conv2d(v[0], v[1], 1, 1));
    case!("depthwise_s2", [[2, 3, 7, 7], [3, 1, 3, 3]], |g, v| g
        .depthwise_conv2d(v[0], v[1], 2, 1));
    case!("pointwise_conv", [[2, 3, 4, 4], [5, 3]], |g, v| g
        .pointwise_conv(v[0], v[1]));
    case!("batch_norm_train", [[4, 3, 3, 3], [3], [3]], |g, v| g
        .batch_norm(v[0], v[1], v[2], None)
        .map(|r| r.0));
    {
        let rm = [0.1, -0.2, 0.3];
        let rv = [0.5, 1.5, 2.0];
        case!("batch_norm_eval", [[4, 3, 3, 3], [3], [3]], |g, v| g
            .batch_norm(v[0], v[1], v[2], Some((&rm, &rv)))
            .map(|r| r.0));
    }
    case!("global_avg_pool", [[2, 3, 4, 4]], |g, v| g.global_avg_pool(v[0]));
    case!("dropout_train", [[4, 8]], |g, v| g.dropout(v[0], 0.35, true, 5));
    case!("reshape", [[2, 6]], |g, v| g.reshape(v[0], vec![3, 4]));
    case!("repeat_seq", [[2, 1, 5]], |g, v| g.repeat_seq(v[0], 4));
    case!("time_step", [[2, 4, 3]], |g, v| g.time_step(v[0], 2));
    case!("stack_steps", [[2, 3], [2, 3], [2, 3]], |g, v| g.stack_steps(v));
    case!("slice_cols", [[3, 6]], |g, v| g.slice_cols(v[0], 2, 3));
    case!("softmax", [[3, 5]], |g, v| g.softmax(v[0]));
    case!("cross_entropy", [[4, 3]], |g, v| {
        let p = g.softmax(v[0])?;
        g.cross_entropy(p, &[0, 2, 1, 2], Some(&[1.0, 2.0, 0.5]))
    });
    case!("softmax_cross_entropy", [[4, 3]], |g, v| g.softmax_cross_entropy(
        v[0],
        &[0, 2, 1, 2],
        Some(&[1.0, 2.0, 0.5])
    ));
    case!("sum_squares", [[3, 3]], |g, v| Ok::<_, crate::Error>(
        g.sum_squares(v[0])
    ));
    case!("gru_layer", [[2, 4, 3], [3, 12], [4, 12], [12]], |g, v| g
        .gru_layer(v[0], v[1], v[2], v[3])
        .map(|r| r.0));
    Ok(results)
}
