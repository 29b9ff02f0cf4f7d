//! FGSM, PGD, DeepFool and Carlini-Wagner, each driven by exact or
//! finite-difference gradients of the source model.

mod cw;
mod deepfool;
pub mod gradient;
mod sign;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::model::InstrumentedModel;
use crate::tensor::Tensor;

pub use cw::carlini_wagner;
pub use deepfool::deepfool;
pub use gradient::{estimate_gradient, GradientMode};
pub use sign::{fgsm, pgd};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    DeepFool,
    CarliniWagner,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [Self::Fgsm, Self::Pgd, Self::DeepFool, Self::CarliniWagner];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Pgd => "pgd",
            Self::DeepFool => "deepfool",
            Self::CarliniWagner => "cw",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            "deepfool" => Ok(Self::DeepFool),
            "cw" | "carlini-wagner" | "c&w" => Ok(Self::CarliniWagner),
            other => Err(Error::Config(format!("unknown attack `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ budget for FGSM and PGD.
    pub epsilon: f32,
    pub iterations: usize,
    /// PGD step; `None` means `epsilon / 4`.
    pub alpha: Option<f32>,
    /// C&W step size.
    pub learning_rate: f32,
    /// C&W weight on the margin term.
    pub tradeoff: f32,
    /// C&W success needs the wrong class's probability to reach this.
    pub confidence: f32,
    pub kappa: f32,
    /// DeepFool overshoot η.
    pub overshoot: f32,
    /// FGSM only: descend towards a seed-drawn class instead of ascending
    /// the true-class loss.
    pub targeted: bool,
    pub gradient: GradientMode,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        let iterations = match kind {
            AttackKind::Fgsm => 1,
            AttackKind::Pgd => 10,
            AttackKind::DeepFool => 50,
            AttackKind::CarliniWagner => 20,
        };
        Self {
            kind,
            epsilon: 0.1,
            iterations,
            alpha: None,
            learning_rate: 0.5,
            tradeoff: 1.0,
            confidence: 0.0,
            kappa: 0.0,
            overshoot: 0.02,
            targeted: false,
            gradient: GradientMode::Exact,
            seed: 0,
        }
    }

    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            epsilon,
            ..Self::new(AttackKind::Fgsm)
        }
    }

    pub fn pgd(epsilon: f32, iterations: usize) -> Self {
        Self {
            epsilon,
            iterations,
            ..Self::new(AttackKind::Pgd)
        }
    }

    pub fn carlini_wagner(learning_rate: f32, steps: usize, confidence: f32) -> Self {
        Self {
            learning_rate,
            iterations: steps,
            confidence,
            ..Self::new(AttackKind::CarliniWagner)
        }
    }

    pub fn with_gradient(mut self, gradient: GradientMode) -> Self {
        self.gradient = gradient;
        self
    }

    pub fn step(&self) -> f32 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.confidence) {
            return bad(format!("confidence must be in [0, 1), got {}", self.confidence));
        }
        if let GradientMode::Estimated { delta } = self.gradient {
            if !(delta > 0.0) {
                return bad(format!("estimation step must be > 0, got {delta}"));
            }
        }
        if self.alpha.is_some_and(|a| !(a > 0.0)) || !(self.learning_rate > 0.0) {
            return bad("step sizes must be > 0".into());
        }
        Ok(())
    }

    /// Short label such as `fgsm eps=0.02` used in reports.
    pub fn label(&self) -> String {
        let base = match self.kind {
            AttackKind::Fgsm => format!("fgsm eps={}", self.epsilon),
            AttackKind::Pgd => format!("pgd eps={} i={}", self.epsilon, self.iterations),
            AttackKind::DeepFool => format!("deepfool i={}", self.iterations),
            AttackKind::CarliniWagner => format!(
                "cw lr={} i={} conf={}",
                self.learning_rate, self.iterations, self.confidence
            ),
        };
        match self.gradient {
            GradientMode::Exact => base,
            GradientMode::Estimated { .. } => format!("{base} ge"),
        }
    }

    pub fn to_fields(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("attack", self.kind.name().to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("iterations", self.iterations.to_string()),
            ("alpha", self.alpha.map_or("auto".into(), |a| a.to_string())),
            ("lr", self.learning_rate.to_string()),
            ("c", self.tradeoff.to_string()),
            ("conf", self.confidence.to_string()),
            ("kappa", self.kappa.to_string()),
            ("overshoot", self.overshoot.to_string()),
            ("targeted", self.targeted.to_string()),
            ("seed", self.seed.to_string()),
        ];
        match self.gradient {
            GradientMode::Exact => v.push(("gradient", "exact".into())),
            GradientMode::Estimated { delta } => {
                v.push(("gradient", "estimated".into()));
                v.push(("delta", delta.to_string()));
            }
        }
        v.into_iter().map(|(k, val)| (k.to_string(), val)).collect()
    }

    /// Reads `attack` (required) and any other known field; unknown fields
    /// are rejected.
    pub fn from_fields(fields: &BTreeMap<String, String>) -> Result<Self> {
        let kind: AttackKind = fields
            .get("attack")
            .ok_or_else(|| Error::Config("missing `attack`".into()))?
            .parse()?;
        let mut c = Self::new(kind);
        let mut gradient = "exact".to_string();
        let mut delta = GradientMode::DEFAULT_DELTA;
        for (k, v) in fields {
            let num = |v: &str| -> Result<f32> {
                v.parse().map_err(|_| Error::Config(format!("`{k}`: `{v}` is not a number")))
            };
            let int = |v: &str| -> Result<u64> {
                v.parse().map_err(|_| Error::Config(format!("`{k}`: `{v}` is not an integer")))
            };
            match k.as_str() {
                "attack" => {}
                "epsilon" | "eps" => c.epsilon = num(v)?,
                "iterations" | "steps" | "i" => c.iterations = int(v)? as usize,
                "alpha" => c.alpha = if v == "auto" { None } else { Some(num(v)?) },
                "lr" => c.learning_rate = num(v)?,
                "c" => c.tradeoff = num(v)?,
                "conf" => c.confidence = num(v)?,
                "kappa" => c.kappa = num(v)?,
                "overshoot" => c.overshoot = num(v)?,
                "targeted" => {
                    c.targeted = v
                        .parse()
                        .map_err(|_| Error::Config(format!("`targeted`: `{v}` is not true/false")))?
                }
                "seed" => c.seed = int(v)?,
                "gradient" => gradient = v.clone(),
                "delta" => delta = num(v)?,
                other => return Err(Error::Config(format!("unknown attack field `{other}`"))),
            }
        }
        c.gradient = match gradient.as_str() {
            "exact" => GradientMode::Exact,
            "estimated" => GradientMode::Estimated { delta },
            other => return Err(Error::Config(format!("unknown gradient mode `{other}`"))),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Per-sample ℓ₂ and ℓ∞ of `perturbed − originals` over flattened pixels.
pub fn per_sample_norms(originals: &Tensor, perturbed: &Tensor) -> (Vec<f64>, Vec<f64>) {
    (0..originals.batch())
        .map(|n| {
            let (mut sq, mut max) = (0.0f64, 0.0f64);
            for (&a, &b) in originals.sample(n).iter().zip(perturbed.sample(n)) {
                let d = (b - a) as f64;
                sq += d * d;
                max = max.max(d.abs());
            }
            (sq.sqrt(), max)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<usize>,
    pub source_fingerprint: String,
    /// Key fingerprint of the source model, `none` for a baseline.
    pub key_fingerprint: String,
    pub config: AttackConfig,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
    /// Whether the attack fooled the source model.
    pub success: Vec<bool>,
    /// Steps actually taken per sample.
    pub iterations: Vec<usize>,
}

impl AdversarialBatch {
    pub fn assemble(
        model: &InstrumentedModel,
        config: &AttackConfig,
        originals: &Tensor,
        perturbed: Tensor,
        labels: &[usize],
        success: Vec<bool>,
        iterations: Vec<usize>,
    ) -> Self {
        let (l2, linf) = per_sample_norms(originals, &perturbed);
        Self {
            originals: originals.clone(),
            perturbed,
            labels: labels.to_vec(),
            source_fingerprint: model.fingerprint(),
            key_fingerprint: model.key().map_or("none".into(), |k| k.fingerprint()),
            config: config.clone(),
            l2,
            linf,
            success,
            iterations,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    pub fn to_container(&self) -> Container {
        let mut header = BTreeMap::new();
        header.insert("kind".into(), "adversarial-batch".into());
        header.insert("source".into(), self.source_fingerprint.clone());
        header.insert("key".into(), self.key_fingerprint.clone());
        for (k, v) in self.config.to_fields() {
            header.insert(format!("attack.{k}"), v);
        }
        let n = self.len();
        let col = |v: Vec<f32>| Tensor::new(vec![n], v).expect("one value per sample");
        let tensors = vec![
            ("originals".into(), self.originals.clone()),
            ("perturbed".into(), self.perturbed.clone()),
            ("labels".into(), col(self.labels.iter().map(|&l| l as f32).collect())),
            ("success".into(), col(self.success.iter().map(|&s| s as u8 as f32).collect())),
            ("iterations".into(), col(self.iterations.iter().map(|&i| i as f32).collect())),
        ];
        Container { header, tensors }
    }

    /// Norms are recomputed from the stored images.
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.field("kind")? != "adversarial-batch" {
            return Err(Error::Mismatch(format!(
                "expected an adversarial batch, found `{}`",
                c.field("kind")?
            )));
        }
        let fields: BTreeMap<String, String> = c
            .header
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("attack.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = AttackConfig::from_fields(&fields)?;
        let originals = c.tensor("originals")?.clone();
        let perturbed = c.tensor("perturbed")?.clone();
        if originals.shape() != perturbed.shape() {
            return Err(Error::Mismatch("originals and perturbed differ in shape".into()));
        }
        let n = originals.batch();
        let column = |name: &str| -> Result<Vec<f32>> {
            let t = c.tensor(name)?;
            if t.len() != n {
                return Err(Error::Mismatch(format!("`{name}` has {} entries for {n} samples", t.len())));
            }
            Ok(t.data().to_vec())
        };
        let (l2, linf) = per_sample_norms(&originals, &perturbed);
        Ok(Self {
            labels: column("labels")?.into_iter().map(|v| v as usize).collect(),
            success: column("success")?.into_iter().map(|v| v != 0.0).collect(),
            iterations: column("iterations")?.into_iter().map(|v| v as usize).collect(),
            originals,
            perturbed,
            source_fingerprint: c.field("source")?.to_string(),
            key_fingerprint: c.field("key")?.to_string(),
            config,
            l2,
            linf,
        })
    }
}

/// Mean ℓ₂ and mean ℓ∞ over the batch.
pub fn distortion_norms(batch: &AdversarialBatch) -> (f64, f64) {
    let n = batch.len().max(1) as f64;
    (batch.l2.iter().sum::<f64>() / n, batch.linf.iter().sum::<f64>() / n)
}

pub fn run_attack(model: &InstrumentedModel, x: &Tensor, labels: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    config.validate()?;
    match config.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, config),
        AttackKind::Pgd => pgd(model, x, labels, config),
        AttackKind::DeepFool => deepfool(model, x, labels, config),
        AttackKind::CarliniWagner => carlini_wagner(model, x, labels, config),
    }
}

fn check_pixels(x: &Tensor) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("attack inputs must lie in [0, 1]".into()))
    }
}

/// Target classes for targeted runs: uniform over classes other than the
/// true one, drawn from the config seed.
fn draw_targets(labels: &[usize], classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .map(|&y| {
            let t = rng.gen_range(0..classes - 1);
            if t >= y {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::Key;
    use crate::model::build_model;

    #[test]
    fn norms_examples() {
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let (l2, linf) = per_sample_norms(&x, &x);
        assert_eq!((l2, linf), (vec![0.0; 2], vec![0.0; 2]));
        let mut one = Tensor::zeros(&[1, 1, 28, 28]);
        one.data_mut()[100] = 0.5;
        let (l2, linf) = per_sample_norms(&Tensor::zeros(&[1, 1, 28, 28]), &one);
        assert_eq!((l2[0], linf[0]), (0.5, 0.5));
        let eps = 0.25f32;
        let up = Tensor::full(&[1, 1, 28, 28], eps);
        let (l2, _) = per_sample_norms(&Tensor::zeros(&[1, 1, 28, 28]), &up);
        assert!((l2[0] - 28.0 * eps as f64).abs() < 1e-9);
    }

    #[test]
    fn config_fields_round_trip() {
        let mut c = AttackConfig::carlini_wagner(0.5, 20, 0.999);
        c.gradient = GradientMode::Estimated { delta: 1e-3 };
        c.alpha = Some(0.0125);
        c.seed = 77;
        let fields: BTreeMap<String, String> = c.to_fields().into_iter().collect();
        assert_eq!(AttackConfig::from_fields(&fields).unwrap(), c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = AttackConfig::fgsm(-0.1);
        assert!(c.validate().is_err());
        c = AttackConfig::pgd(0.1, 0);
        assert!(c.validate().is_err());
        c = AttackConfig::carlini_wagner(0.5, 20, 1.0);
        assert!(c.validate().is_err());
        c = AttackConfig::fgsm(0.1).with_gradient(GradientMode::Estimated { delta: 0.0 });
        assert!(c.validate().is_err());
        let fields: BTreeMap<String, String> = [("attack".to_string(), "fgsm".to_string()), ("bogus".into(), "1".into())]
            .into_iter()
            .collect();
        assert!(AttackConfig::from_fields(&fields).is_err());
    }

    #[test]
    fn targets_avoid_true_class() {
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let t = draw_targets(&labels, 10, 3);
        assert!(t.iter().zip(&labels).all(|(a, b)| a != b && *a < 10));
        assert_eq!(t, draw_targets(&labels, 10, 3));
    }

    #[test]
    fn batch_container_round_trip() {
        let m = build_model("lenet5", Some(Key::parse("2x^2+3x+5<6").unwrap()), 1).unwrap();
        let x = Tensor::from_fn(&[3, 1, 28, 28], |i| ((i * 13) % 29) as f32 / 29.0);
        let b = run_attack(&m, &x, &[1, 2, 3], &AttackConfig::fgsm(0.05)).unwrap();
        let back = AdversarialBatch::from_container(&b.to_container()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.key_fingerprint, m.key().unwrap().fingerprint());
    }
}
