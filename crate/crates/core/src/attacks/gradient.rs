//! Input gradients of per-sample objectives, exact (tape) or estimated by
//! coordinate-wise central differences on model outputs only.

use crate::error::{Error, Result};
use crate::model::InstrumentedModel;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientMode {
    Exact,
    /// Black-box: `2·dim` forward passes per sample with step `delta`.
    Estimated { delta: f32 },
}

impl GradientMode {
    pub const DEFAULT_DELTA: f32 = 1e-3;
}

/// Scalar per-sample objective of the logits.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// `−log softmax(z)[y]`.
    CrossEntropy(&'a [usize]),
    /// `max(z_y − max_{j≠y} z_j, −κ)`.
    Margin { labels: &'a [usize], kappa: f32 },
}

impl Objective<'_> {
    fn labels(&self) -> &[usize] {
        match self {
            Objective::CrossEntropy(l) | Objective::Margin { labels: l, .. } => l,
        }
    }

    /// Value for one row of logits belonging to sample `n`.
    pub fn eval_row(&self, row: &[f32], n: usize) -> f64 {
        match *self {
            Objective::CrossEntropy(labels) => cross_entropy_row(row, labels[n]),
            Objective::Margin { labels, kappa } => {
                let y = labels[n];
                let other = best_other(row, y).1;
                ((row[y] - other) as f64).max(-kappa as f64)
            }
        }
    }
}

pub fn cross_entropy_row(row: &[f32], y: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - row[y] as f64
}

/// Index and value of the largest logit other than `y` (first on ties).
pub fn best_other(row: &[f32], y: usize) -> (usize, f32) {
    row.iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .fold((usize::MAX, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
}

pub fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_labels(labels: &[usize], x: &Tensor, classes: usize) -> Result<()> {
    if labels.len() != x.batch() {
        return Err(Error::shape(
            "attack",
            format!("{} labels for batch of {}", labels.len(), x.batch()),
        ));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Per-sample objective values at `x` and the gradient of each sample's own
/// objective with respect to that sample.
pub fn objective_gradient(
    model: &InstrumentedModel,
    x: &Tensor,
    objective: Objective<'_>,
    mode: GradientMode,
) -> Result<(Vec<f64>, Tensor)> {
    check_labels(objective.labels(), x, model.descriptor().classes())?;
    match mode {
        GradientMode::Exact => {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let fwd = model.forward(&mut tape, xv, false)?;
            let k = tape.value(fwd.logits).sample_len();
            let values = tape
                .value(fwd.logits)
                .data()
                .chunks(k)
                .enumerate()
                .map(|(n, row)| objective.eval_row(row, n))
                .collect();
            let total = match objective {
                Objective::CrossEntropy(labels) => {
                    let mean = tape.softmax_cross_entropy(fwd.logits, labels)?;
                    tape.scale(mean, x.batch() as f32)
                }
                Objective::Margin { labels, kappa } => tape.logit_margin(fwd.logits, labels, kappa)?,
            };
            let grad = tape.backward(total)?.wrt(&tape, xv);
            Ok((values, grad))
        }
        GradientMode::Estimated { delta } => {
            let logits = model.logits(x)?;
            let k = logits.sample_len();
            let values = logits
                .data()
                .chunks(k)
                .enumerate()
                .map(|(n, row)| objective.eval_row(row, n))
                .collect();
            let mut grad = Tensor::zeros(x.shape());
            for n in 0..x.batch() {
                let probes = probe_logits(model, x, n, delta)?;
                for (i, g) in grad.sample_mut(n).iter_mut().enumerate() {
                    let plus = objective.eval_row(probes.sample(2 * i), n);
                    let minus = objective.eval_row(probes.sample(2 * i + 1), n);
                    *g = ((plus - minus) / (2.0 * delta as f64)) as f32;
                }
            }
            Ok((values, grad))
        }
    }
}

/// Logits of sample `n` shifted by `±delta` along each coordinate: row
/// `2i` is `+δeᵢ`, row `2i+1` is `−δeᵢ`.
pub fn probe_logits(model: &InstrumentedModel, x: &Tensor, n: usize, delta: f32) -> Result<Tensor> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("estimation step must be > 0, got {delta}")));
    }
    let base = x.sample(n);
    let d = base.len();
    let mut shape = x.shape().to_vec();
    shape[0] = 2 * d;
    let mut probes = Tensor::zeros(&shape);
    for i in 0..d {
        for (r, sign) in [(2 * i, 1.0), (2 * i + 1, -1.0)] {
            let row = probes.sample_mut(r);
            row.copy_from_slice(base);
            row[i] += sign * delta;
        }
    }
    model.logits(&probes)
}

/// Black-box estimate of the per-sample cross-entropy gradient.
pub fn estimate_gradient(model: &InstrumentedModel, x: &Tensor, labels: &[usize], delta: f32) -> Result<Tensor> {
    let (_, g) = objective_gradient(model, x, Objective::CrossEntropy(labels), GradientMode::Estimated { delta })?;
    Ok(g)
}

/// Logits at `x` and, per class `k`, the input gradient of logit `k`.
pub fn logit_jacobian(model: &InstrumentedModel, x: &Tensor, mode: GradientMode) -> Result<(Tensor, Vec<Tensor>)> {
    let classes = model.descriptor().classes();
    match mode {
        GradientMode::Exact => {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let fwd = model.forward(&mut tape, xv, false)?;
            let logits = tape.value(fwd.logits).clone();
            let mut rows = Vec::with_capacity(classes);
            let mut seed = vec![0.0f32; logits.len()];
            for k in 0..classes {
                seed.iter_mut().enumerate().for_each(|(i, s)| *s = (i % classes == k) as u8 as f32);
                rows.push(tape.backward_with_seed(fwd.logits, &seed)?.wrt(&tape, xv));
            }
            Ok((logits, rows))
        }
        GradientMode::Estimated { delta } => {
            let logits = model.logits(x)?;
            let mut rows = vec![Tensor::zeros(x.shape()); classes];
            for n in 0..x.batch() {
                let probes = probe_logits(model, x, n, delta)?;
                let d = x.sample_len();
                for (k, row) in rows.iter_mut().enumerate() {
                    let out = row.sample_mut(n);
                    for (i, o) in out.iter_mut().enumerate().take(d) {
                        let diff = probes.sample(2 * i)[k] - probes.sample(2 * i + 1)[k];
                        *o = diff / (2.0 * delta);
                    }
                }
            }
            Ok((logits, rows))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ArchDescriptor, Layer, LayerSpec};

    /// `z = W x` on a flattened 1×1×3 input, no bias.
    pub(crate) fn linear_model(w: &[[f32; 3]]) -> InstrumentedModel {
        let k = w.len();
        let desc = ArchDescriptor {
            name: "linear".into(),
            input: [1, 1, 3],
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear(k)],
        };
        let mut m = InstrumentedModel::build(desc, None, 0).unwrap();
        if let Layer::Linear { weight, bias } = &mut m.layers_mut()[1] {
            // stored as [D, E]
            *weight = Tensor::from_fn(&[3, k], |i| w[i % k][i / k]);
            *bias = Tensor::zeros(&[k]);
        }
        m
    }

    #[test]
    fn estimated_matches_exact_on_a_linear_model() {
        let m = linear_model(&[[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]]);
        let x = Tensor::new(vec![2, 1, 1, 3], vec![0.2, 0.4, 0.6, 0.9, 0.1, 0.3]).unwrap();
        let labels = [0, 1];
        for obj in [Objective::CrossEntropy(&labels), Objective::Margin { labels: &labels, kappa: 100.0 }] {
            let (va, ga) = objective_gradient(&m, &x, obj, GradientMode::Exact).unwrap();
            let (vb, gb) = objective_gradient(&m, &x, obj, GradientMode::Estimated { delta: 1e-3 }).unwrap();
            assert_eq!(va, vb);
            for (a, b) in ga.data().iter().zip(gb.data()) {
                assert!((a - b).abs() < 2e-3, "{a} vs {b}");
            }
        }
        // margin of a two-class linear model: gradient is w_y − w_other
        let (_, g) = objective_gradient(&m, &x, Objective::Margin { labels: &labels, kappa: 100.0 }, GradientMode::Exact).unwrap();
        assert_eq!(g.sample(0), &[1.0, -5.0, 1.5]);
    }

    #[test]
    fn jacobian_rows_are_weight_rows() {
        let w = [[1.0, -2.0, 0.5], [0.0, 3.0, -1.0], [2.0, 2.0, 2.0]];
        let m = linear_model(&w);
        let x = Tensor::full(&[1, 1, 1, 3], 0.5);
        for mode in [GradientMode::Exact, GradientMode::Estimated { delta: 1e-2 }] {
            let (_, rows) = logit_jacobian(&m, &x, mode).unwrap();
            for (k, r) in rows.iter().enumerate() {
                for (a, b) in r.data().iter().zip(&w[k]) {
                    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn estimate_matches_quadratic_within_delta_squared() {
        // central differences are second order: halving δ quarters the error
        let m = linear_model(&[[4.0, -2.0, 1.0], [-3.0, 3.0, -1.0]]);
        let x = Tensor::new(vec![1, 1, 1, 3], vec![0.3, 0.7, 0.1]).unwrap();
        let (_, exact) = objective_gradient(&m, &x, Objective::CrossEntropy(&[0]), GradientMode::Exact).unwrap();
        let err = |d: f32| {
            let est = estimate_gradient(&m, &x, &[0], d).unwrap();
            est.data().iter().zip(exact.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max)
        };
        let ratio = err(0.1) / err(0.05);
        assert!((3.0..5.0).contains(&ratio), "error ratio {ratio}");
    }

    #[test]
    fn estimated_signs_agree_on_lenet() {
        let m = build_model("lenet5", None, 3).unwrap();
        let x = Tensor::from_fn(&[1, 1, 28, 28], |i| ((i * 37) % 101) as f32 / 101.0);
        let (_, exact) = objective_gradient(&m, &x, Objective::CrossEntropy(&[3]), GradientMode::Exact).unwrap();
        let est = estimate_gradient(&m, &x, &[3], 1e-3).unwrap();
        let (mut agree, mut total) = (0, 0);
        for (&a, &b) in exact.data().iter().zip(est.data()) {
            if a.abs() > 1e-4 {
                total += 1;
                agree += (a.signum() == b.signum()) as usize;
            }
        }
        assert!(total > 0);
        assert!(agree as f64 >= 0.95 * total as f64, "{agree}/{total}");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = linear_model(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let x = Tensor::zeros(&[1, 1, 1, 3]);
        assert!(estimate_gradient(&m, &x, &[0], 0.0).is_err());
        assert!(objective_gradient(&m, &x, Objective::CrossEntropy(&[5]), GradientMode::Exact).is_err());
        assert!(objective_gradient(&m, &x, Objective::CrossEntropy(&[0, 1]), GradientMode::Exact).is_err());
    }
}
