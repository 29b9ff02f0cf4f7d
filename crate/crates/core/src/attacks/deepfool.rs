use super::gradient::logit_jacobian;
use super::{check_pixels, AdversarialBatch, AttackConfig};
use crate::error::Result;
use crate::model::InstrumentedModel;
use crate::tensor::Tensor;

/// Multiclass ℓ₂ DeepFool. Each step linearizes every competing logit
/// difference at `x + r` and moves onto the nearest linearized boundary;
/// a sample stops once `x + (1+η)·r` is misclassified. Samples the model
/// already gets wrong are left untouched.
pub fn deepfool(model: &InstrumentedModel, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    check_pixels(x)?;
    let n = x.batch();
    let d = x.sample_len();
    let scale = 1.0 + config.overshoot;
    let overshoot = |r: &[f32], n: usize, out: &mut [f32]| {
        for ((o, &xi), &ri) in out.iter_mut().zip(x.sample(n)).zip(r) {
            *o = (xi + scale * ri).clamp(0.0, 1.0);
        }
    };
    let mut r_tot = vec![vec![0.0f32; d]; n];
    let mut iterations = vec![0usize; n];
    let first = model.logits(x)?.argmax_rows();
    let mut active: Vec<usize> = (0..n).filter(|&i| first[i] == labels[i]).collect();

    for _ in 0..config.iterations {
        if active.is_empty() {
            break;
        }
        // stop samples whose overshot point already flips
        let mut probe = x.gather(&active);
        for (j, &s) in active.iter().enumerate() {
            overshoot(&r_tot[s], s, probe.sample_mut(j));
        }
        let preds = model.logits(&probe)?.argmax_rows();
        active = active
            .iter()
            .zip(&preds)
            .filter(|&(&s, &p)| p == labels[s])
            .map(|(&s, _)| s)
            .collect();
        if active.is_empty() {
            break;
        }
        let mut at = x.gather(&active);
        for (j, &s) in active.iter().enumerate() {
            for (v, &ri) in at.sample_mut(j).iter_mut().zip(&r_tot[s]) {
                *v += ri;
            }
        }
        let (logits, jac) = logit_jacobian(model, &at, config.gradient)?;
        for (j, &s) in active.iter().enumerate() {
            let y = labels[s];
            let z = logits.sample(j);
            let gy = jac[y].sample(j);
            let mut best: Option<(f64, f64, Vec<f32>)> = None;
            for (k, jk) in jac.iter().enumerate() {
                if k == y {
                    continue;
                }
                let w: Vec<f32> = jk.sample(j).iter().zip(gy).map(|(a, b)| a - b).collect();
                let norm_sq: f64 = w.iter().map(|&v| v as f64 * v as f64).sum();
                if norm_sq == 0.0 {
                    continue;
                }
                let f = (z[k] - z[y]) as f64;
                let dist = f.abs() / norm_sq.sqrt();
                if best.as_ref().is_none_or(|(bd, _, _)| dist < *bd) {
                    best = Some((dist, f.abs() / norm_sq, w));
                }
            }
            if let Some((_, step, w)) = best {
                for (r, wi) in r_tot[s].iter_mut().zip(w) {
                    *r += (step * wi as f64) as f32;
                }
            }
            iterations[s] += 1;
        }
    }

    let mut adv = x.clone();
    for s in 0..n {
        let r = std::mem::take(&mut r_tot[s]);
        overshoot(&r, s, adv.sample_mut(s));
    }
    let preds = model.logits(&adv)?.argmax_rows();
    let success = preds.iter().zip(labels).map(|(p, y)| p != y).collect();
    Ok(AdversarialBatch::assemble(model, config, x, adv, labels, success, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{AttackKind, GradientMode};
    use crate::model::{ArchDescriptor, Layer, LayerSpec};

    fn binary(w: [[f32; 4]; 2], b: [f32; 2]) -> InstrumentedModel {
        let desc = ArchDescriptor {
            name: "linear".into(),
            input: [1, 2, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear(2)],
        };
        let mut m = InstrumentedModel::build(desc, None, 0).unwrap();
        if let Layer::Linear { weight, bias } = &mut m.layers_mut()[1] {
            *weight = Tensor::from_fn(&[4, 2], |i| w[i % 2][i / 2]);
            *bias = Tensor::new(vec![2], b.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn linear_perturbation_is_overshot_hyperplane_distance() {
        let w = [[1.0, -0.5, 0.25, 0.0], [-0.5, 0.5, -0.25, 0.75]];
        let b = [0.3, 0.0];
        let m = binary(w, b);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.55, 0.4, 0.5, 0.45]).unwrap();
        let dw: Vec<f64> = (0..4).map(|i| (w[1][i] - w[0][i]) as f64).collect();
        let f: f64 = (0..4).map(|i| dw[i] * x.data()[i] as f64).sum::<f64>() + (b[1] - b[0]) as f64;
        assert!(f < 0.0, "starts in class 0");
        let dist = f.abs() / dw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for mode in [GradientMode::Exact, GradientMode::Estimated { delta: 1e-3 }] {
            let mut c = super::AttackConfig::new(AttackKind::DeepFool);
            c.gradient = mode;
            let batch = deepfool(&m, &x, &[0], &c).unwrap();
            assert!((batch.l2[0] - 1.02 * dist).abs() < 1e-4 * dist, "{} vs {}", batch.l2[0], 1.02 * dist);
            assert!(batch.success[0]);
            assert_eq!(batch.iterations[0], 1);
        }
    }

    #[test]
    fn misclassified_sample_is_untouched() {
        let m = binary([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]], [0.0, 0.0]);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.9, 0.0, 0.0]).unwrap();
        let batch = deepfool(&m, &x, &[0], &super::AttackConfig::new(AttackKind::DeepFool)).unwrap();
        assert_eq!(batch.perturbed, x);
        assert_eq!(batch.iterations[0], 0);
        assert_eq!(batch.l2[0], 0.0);
    }
}
