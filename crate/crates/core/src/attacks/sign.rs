use super::gradient::{objective_gradient, Objective};
use super::{check_pixels, draw_targets, AdversarialBatch, AttackConfig};
use crate::error::Result;
use crate::model::InstrumentedModel;
use crate::tensor::Tensor;

/// Zero stays zero, unlike `f32::signum`.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `iterations` signed steps of size `alpha`, each projected onto the
/// ℓ∞ ball of radius `epsilon` around `x` and onto `[0, 1]`.
fn signed_steps(
    model: &InstrumentedModel,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    alpha: f32,
) -> Result<AdversarialBatch> {
    check_pixels(x)?;
    let eps = config.epsilon;
    let targets = config
        .targeted
        .then(|| draw_targets(labels, model.descriptor().classes(), config.seed));
    // untargeted: climb the true-class loss; targeted: descend the target's
    let (goal, direction) = match &targets {
        Some(t) => (t.as_slice(), -1.0),
        None => (labels, 1.0),
    };
    let mut adv = x.clone();
    for _ in 0..config.iterations {
        let (_, g) = objective_gradient(model, &adv, Objective::CrossEntropy(goal), config.gradient)?;
        for ((a, &o), &gi) in adv.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            let stepped = *a + direction * alpha * sign(gi);
            *a = stepped.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    }
    let preds = model.logits(&adv)?.argmax_rows();
    let success = match &targets {
        Some(t) => preds.iter().zip(t).map(|(p, t)| p == t).collect(),
        None => preds.iter().zip(labels).map(|(p, y)| p != y).collect(),
    };
    let iterations = vec![config.iterations; labels.len()];
    Ok(AdversarialBatch::assemble(model, config, x, adv, labels, success, iterations))
}

/// `clip(x + ε·sign(∇ₓ ℓ(F(x), y)))` with one gradient evaluation.
pub fn fgsm(model: &InstrumentedModel, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    let single = AttackConfig {
        iterations: 1,
        ..config.clone()
    };
    signed_steps(model, x, labels, &single, config.epsilon)
}

pub fn pgd(model: &InstrumentedModel, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    signed_steps(model, x, labels, config, config.step())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::gradient::GradientMode;
    use crate::attacks::AttackKind;
    use crate::model::{ArchDescriptor, Layer, LayerSpec};

    fn linear(w: &[[f32; 4]; 2]) -> InstrumentedModel {
        let desc = ArchDescriptor {
            name: "linear".into(),
            input: [1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear(2)],
        };
        let mut m = InstrumentedModel::build(desc, None, 0).unwrap();
        if let Layer::Linear { weight, bias } = &mut m.layers_mut()[1] {
            *weight = Tensor::from_fn(&[4, 2], |i| w[i % 2][i / 2]);
            *bias = Tensor::zeros(&[2]);
        }
        m
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = linear(&[[1.0, -1.0, 2.0, 0.0], [0.0, 1.0, -1.0, 1.0]]);
        let x = Tensor::full(&[1, 1, 2, 2], 0.5);
        let b = fgsm(&m, &x, &[0], &AttackConfig::fgsm(0.0)).unwrap();
        assert_eq!(b.perturbed, x);
    }

    #[test]
    fn direction_follows_weight_difference() {
        // CE gradient at label 0 is (p − onehot)·W, proportional to w1 − w0
        let w = [[1.0, -1.0, 2.0, 0.5], [0.0, 1.0, -1.0, 1.0]];
        let m = linear(&w);
        let x = Tensor::full(&[1, 1, 2, 2], 0.5);
        for mode in [GradientMode::Exact, GradientMode::Estimated { delta: 1e-3 }] {
            let b = fgsm(&m, &x, &[0], &AttackConfig::fgsm(0.1).with_gradient(mode)).unwrap();
            for (i, v) in b.perturbed.data().iter().enumerate() {
                let want = 0.5 + 0.1 * sign(w[1][i] - w[0][i]);
                assert!((v - want).abs() < 1e-6, "{mode:?} pixel {i}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn budget_holds_and_is_attained_when_unclipped() {
        let m = linear(&[[1.0, -1.0, 2.0, 0.5], [0.0, 1.0, -1.0, 1.0]]);
        let x = Tensor::new(vec![2, 1, 2, 2], vec![0.0, 0.5, 1.0, 0.3, 0.2, 0.98, 0.6, 0.01]).unwrap();
        let eps = 0.05;
        let b = fgsm(&m, &x, &[0, 1], &AttackConfig::fgsm(eps)).unwrap();
        for (&o, &a) in x.data().iter().zip(b.perturbed.data()) {
            assert!((0.0..=1.0).contains(&a));
            assert!((a - o).abs() <= eps + 1e-7);
            if a > 0.0 && a < 1.0 {
                assert!(((a - o).abs() - eps).abs() < 1e-6);
            }
        }
        let p = pgd(&m, &x, &[0, 1], &AttackConfig::pgd(eps, 7)).unwrap();
        assert!(p.linf.iter().all(|&d| d <= eps as f64 + 1e-7));
    }

    #[test]
    fn single_full_step_pgd_is_fgsm() {
        let m = crate::model::build_model("lenet5", None, 5).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 31) % 97) as f32 / 97.0);
        let eps = 0.1;
        let f = fgsm(&m, &x, &[3, 7], &AttackConfig::fgsm(eps)).unwrap();
        let mut c = AttackConfig::pgd(eps, 1);
        c.alpha = Some(eps);
        let p = pgd(&m, &x, &[3, 7], &c).unwrap();
        assert_eq!(f.perturbed, p.perturbed);
        assert_eq!(p.config.kind, AttackKind::Pgd);
    }

    #[test]
    fn targeted_descends_towards_target() {
        let m = linear(&[[1.0, -1.0, 2.0, 0.5], [0.0, 1.0, -1.0, 1.0]]);
        let x = Tensor::full(&[1, 1, 2, 2], 0.5);
        let mut c = AttackConfig::fgsm(0.4);
        c.targeted = true;
        // two classes: the only possible target for label 0 is 1
        let b = fgsm(&m, &x, &[0], &c).unwrap();
        assert!(b.success[0]);
    }
}
