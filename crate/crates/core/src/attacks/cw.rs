use super::gradient::{objective_gradient, softmax_row, Objective};
use super::{check_pixels, AdversarialBatch, AttackConfig};
use crate::error::Result;
use crate::model::InstrumentedModel;
use crate::tensor::Tensor;

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

/// Margin that guarantees the wrong class a softmax probability of at least
/// `conf` over `classes` classes: `ln((K−1)·conf / (1−conf))`.
pub fn confidence_margin(conf: f32, classes: usize) -> f32 {
    if conf <= 0.0 {
        return 0.0;
    }
    let c = conf as f64;
    (((classes - 1) as f64 * c) / (1.0 - c)).ln() as f32
}

/// Minimizes `‖x* − x‖₂² + c·max(Z_y − max_{j≠y} Z_j, −κ)` in pixel space
/// with Adam steps of rate `lr`, projecting onto `[0, 1]` after every step.
/// Plain gradient descent is unusable at the customary rates: at `lr = 0.5`
/// the distance term resets `x*` to `x` whenever the margin term saturates.
/// With `conf > 0` the margin target is raised to the one implying that
/// probability, and success additionally requires it.
pub fn carlini_wagner(
    model: &InstrumentedModel,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<AdversarialBatch> {
    check_pixels(x)?;
    let classes = model.descriptor().classes();
    let kappa = config.kappa.max(confidence_margin(config.confidence, classes));
    let objective = Objective::Margin { labels, kappa };
    let mut adv = x.clone();
    let mut m = vec![0.0f32; x.len()];
    let mut v = vec![0.0f32; x.len()];
    for t in 1..=config.iterations as i32 {
        let (_, g) = objective_gradient(model, &adv, objective, config.gradient)?;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let state = adv.data_mut().iter_mut().zip(&mut m).zip(&mut v);
        for (((a, mi), vi), (&o, &gi)) in state.zip(x.data().iter().zip(g.data())) {
            let grad = 2.0 * (*a - o) + config.tradeoff * gi;
            *mi = BETA1 * *mi + (1.0 - BETA1) * grad;
            *vi = BETA2 * *vi + (1.0 - BETA2) * grad * grad;
            *a = (*a - config.learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + EPS)).clamp(0.0, 1.0);
        }
    }
    let logits = model.logits(&adv)?;
    let k = logits.sample_len();
    let success = logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let p = softmax_row(row);
            let pred = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            pred != y && p[pred] >= config.confidence as f64
        })
        .collect();
    let iterations = vec![config.iterations; labels.len()];
    Ok(AdversarialBatch::assemble(model, config, x, adv, labels, success, iterations))
}
