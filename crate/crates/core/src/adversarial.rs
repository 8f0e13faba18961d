//! Fast gradient sign attacks in normalized-image space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_graph, Mode, ModelConfig, ParameterSet};
use crate::numerics::{softmax_rows, Graph, Tensor};
use crate::training::{accuracy, cross_entropy_value, stack_images};

/// Unweighted cross-entropy of an eval-mode forward and its gradient with
/// respect to the input batch.
pub fn input_gradient(
    params: &ParameterSet,
    config: &ModelConfig,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let pass = forward_graph(&mut g, params, config, input, Mode::Eval, false, 0)?;
    let loss = g.softmax_cross_entropy(pass.logits, labels, None)?;
    let value = g.value(loss).item();
    let grad = g.backward(loss)?.take(input).expect("input is a gradient leaf");
    Ok((value, grad))
}

/// `x + ε·sign(∇ₓL)`, with coordinates where rounding overshoots pulled
/// back so that `|x_adv − x| ≤ ε` holds exactly.
pub fn fgsm(params: &ParameterSet, config: &ModelConfig, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::domain(format!(
            "epsilon must be a non-negative number, got {epsilon}"
        )));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, grad) = input_gradient(params, config, x, labels)?;
    let mut adv = x.clone();
    for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
        let orig = *a;
        let step = if g > 0.0 {
            epsilon
        } else if g < 0.0 {
            -epsilon
        } else {
            0.0
        };
        let mut v = orig + step;
        while (v - orig).abs() > epsilon {
            v = toward(v, orig);
        }
        *a = v;
    }
    Ok(adv)
}

/// The neighbouring float of `v` in the direction of `target`.
fn toward(v: f64, target: f64) -> f64 {
    let bits = v.to_bits();
    let up = if v > target { v < 0.0 } else { v >= 0.0 };
    if v == 0.0 {
        return if target > 0.0 {
            f64::from_bits(1)
        } else {
            -f64::from_bits(1)
        };
    }
    f64::from_bits(if up { bits + 1 } else { bits - 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPoint {
    pub epsilon: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub n_samples: usize,
    pub base_accuracy: f64,
    pub base_loss: f64,
    pub points: Vec<AttackPoint>,
}

impl AttackReport {
    pub fn epsilons(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.epsilon).collect()
    }
}

/// Clean evaluation followed by one FGSM evaluation per ε. Batches are
/// attacked in parallel; each batch's result only depends on its own data.
pub fn attack_sweep(
    params: &ParameterSet,
    config: &ModelConfig,
    images: &[&Tensor],
    labels: &[usize],
    epsilons: &[f64],
    batch_size: usize,
) -> Result<AttackReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} images with {} labels",
            images.len(),
            labels.len()
        )));
    }
    if epsilons.windows(2).any(|w| !(w[0] < w[1])) || epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::domain(format!(
            "epsilons must be non-negative and strictly increasing: {epsilons:?}"
        )));
    }
    let batch_size = batch_size.max(1);
    let batches: Vec<(usize, usize)> = (0..images.len())
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(images.len())))
        .collect();
    let mut grid = vec![0.0f64];
    grid.extend(epsilons.iter().copied().filter(|&e| e > 0.0));

    // probs[e][sample] for every epsilon in `grid`.
    let evaluate = |&(s, e): &(usize, usize)| -> Result<Vec<Vec<f64>>> {
        let x = stack_images(&images[s..e])?;
        let y = &labels[s..e];
        grid.iter()
            .map(|&eps| {
                let adv = fgsm(params, config, &x, y, eps)?;
                let mut g = Graph::new();
                let input = g.constant(adv);
                let pass = forward_graph(&mut g, params, config, input, Mode::Eval, false, 0)?;
                Ok(softmax_rows(g.value(pass.logits).data(), config.n_classes))
            })
            .collect()
    };
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(batches.len());
    let per = batches.len().div_ceil(workers);
    let mut results: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..batches.len()).map(|_| None).collect();
    std::thread::scope(|sc| {
        for (w, slot) in results.chunks_mut(per).enumerate() {
            let mine = &batches[w * per..w * per + slot.len()];
            let evaluate = &evaluate;
            sc.spawn(move || {
                for (out, b) in slot.iter_mut().zip(mine) {
                    *out = Some(evaluate(b));
                }
            });
        }
    });
    let mut per_eps: Vec<Vec<f64>> = vec![Vec::with_capacity(images.len() * config.n_classes); grid.len()];
    for r in results {
        for (acc, probs) in per_eps.iter_mut().zip(r.expect("evaluated")?) {
            acc.extend(probs);
        }
    }
    let summarize = |probs: Vec<f64>| -> Result<(f64, f64)> {
        let t = Tensor::new(vec![labels.len(), config.n_classes], probs)?;
        Ok((accuracy(&t, labels), cross_entropy_value(&t, labels, None)?))
    };
    let mut per_eps = per_eps.into_iter();
    let (base_accuracy, base_loss) = summarize(per_eps.next().expect("clean pass"))?;
    let mut attacked = per_eps;
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let (accuracy, mean_loss) = if eps == 0.0 {
            (base_accuracy, base_loss)
        } else {
            summarize(attacked.next().expect("one pass per epsilon"))?
        };
        points.push(AttackPoint {
            epsilon: eps,
            accuracy,
            mean_loss,
        });
    }
    Ok(AttackReport {
        n_samples: labels.len(),
        base_accuracy,
        base_loss,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, ParameterSet, Tensor) {
        let c = ModelConfig {
            n_classes: 3,
            input_size: 16,
            feature_dim: 8,
            seq_len: 3,
            gru_units: 4,
            fc_units: 6,
            backbone_width: 0.125,
            backbone_blocks: 3,
            ..ModelConfig::default()
        };
        let p = build_model(&c, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(
            vec![2, 3, 16, 16],
            (0..2 * 3 * 256).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        (c, p, x)
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (c, p, x) = setup();
        assert_eq!(fgsm(&p, &c, &x, &[0, 2], 0.0).unwrap(), x);
        assert!(fgsm(&p, &c, &x, &[0, 2], -1e-3).is_err());
    }

    #[test]
    fn perturbation_is_bounded_and_saturated() {
        let (c, p, x) = setup();
        let (_, grad) = input_gradient(&p, &c, &x, &[0, 2]).unwrap();
        for eps in [1e-4, 0.01, 0.3] {
            let adv = fgsm(&p, &c, &x, &[0, 2], eps).unwrap();
            for ((a, o), g) in adv.data().iter().zip(x.data()).zip(grad.data()) {
                let d = (a - o).abs();
                assert!(d <= eps);
                if *g != 0.0 {
                    assert!((d - eps).abs() <= eps * 1e-10);
                }
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let (c, p, x) = setup();
        let labels = [1, 0];
        let (_, grad) = input_gradient(&p, &c, &x, &labels).unwrap();
        assert_eq!(grad.shape(), x.shape());
        let h = 1e-5;
        for idx in [5usize, 300, 1000] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let lp = input_gradient(&p, &c, &xp, &labels).unwrap().0;
            let lm = input_gradient(&p, &c, &xm, &labels).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad.data()[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "{fd} {}",
                grad.data()[idx]
            );
        }
    }

    #[test]
    fn ulp_step_never_crosses_target() {
        for (v, t) in [(1.0, 0.5), (-1.0, 0.5), (0.0, 1.0), (1e-300, 0.0), (-3.0, -4.0)] {
            let n = toward(v, t);
            assert!(n != v && (n > v) == (t > v) && (n - t).abs() <= (v - t).abs());
        }
    }

    #[test]
    fn sweep_with_only_zero_equals_clean() {
        let (c, p, x) = setup();
        let imgs: Vec<Tensor> = (0..2)
            .map(|i| Tensor::new(vec![3, 16, 16], x.data()[i * 768..(i + 1) * 768].to_vec()).unwrap())
            .collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let r = attack_sweep(&p, &c, &refs, &[0, 1], &[0.0], 1).unwrap();
        assert_eq!(r.points[0].accuracy, r.base_accuracy);
        assert_eq!(r.points[0].mean_loss, r.base_loss);
        assert!(attack_sweep(&p, &c, &refs, &[0, 1], &[0.1, 0.01], 1).is_err());
    }
}
