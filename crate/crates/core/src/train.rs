//! Regularized training, evaluation and λ calibration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::InstrumentedModel;
use crate::tensor::Tape;

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball SGD; momentum 0 gives plain SGD.
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// Mini-batch training with a step learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    /// Fractions of `epochs` after which the rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f32,
    pub lambda: f32,
    pub seed: u64,
    /// Samples used for [`InstrumentedModel::rescale_from_data`] before the
    /// first step; 0 keeps the plain initialization.
    pub init_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            milestones: vec![0.5, 0.75],
            decay: 0.1,
            lambda: 0.01,
            seed: 0,
            init_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        let betas_ok = match self.optimizer {
            Optimizer::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            Optimizer::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !(self.learning_rate > 0.0) || !betas_ok {
            return Err(Error::Config(format!(
                "need learning rate > 0 and decay rates in [0, 1), got {} with {:?}",
                self.learning_rate, self.optimizer
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `epoch` (0-based).
    pub fn rate_at(&self, epoch: usize) -> f32 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= (m * self.epochs as f64).round())
            .count();
        self.learning_rate * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Fraction of samples raising any detector alarm.
    pub clean_fpr: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f32,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_reg: f64,
    /// Measured on the training batches as they were seen.
    pub train_accuracy: f64,
    pub train_fpr: f64,
    pub eval: Option<EvalReport>,
}

pub fn evaluate(model: &InstrumentedModel, data: &DatasetSplit) -> Result<EvalReport> {
    let inf = model.infer(&data.images)?;
    let n = data.len().max(1) as f64;
    let correct = inf
        .predictions()
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    let flagged = inf.flagged.iter().filter(|&&f| f).count();
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        clean_fpr: flagged as f64 / n,
        samples: data.len(),
    })
}

pub fn train(model: InstrumentedModel, data: &DatasetSplit, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(model, data, cfg, None, |_| {})
}

/// Trains, calling `on_epoch` after every epoch. Final metrics come from
/// `eval` when given, otherwise from `data`.
pub fn train_with(
    mut model: InstrumentedModel,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    eval: Option<&DatasetSplit>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.init_samples > 0 {
        model.rescale_from_data(&data.range(0, cfg.init_samples).images)?;
    }
    let mut first: Vec<Vec<f32>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut second = first.clone();
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.rate_at(epoch);
        let (mut loss_sum, mut ce_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        let (mut correct, mut flagged, mut seen, mut steps) = (0usize, 0usize, 0usize, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.subset(idx);
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let fwd = model.forward(&mut tape, x, true)?;
            let (total, ce, reg) = model.objective(&mut tape, &fwd, &batch.labels, cfg.lambda)?;
            let loss = tape.value(total).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            ce_sum += tape.value(ce).data()[0] as f64;
            reg_sum += reg.map_or(0.0, |r| tape.value(r).data()[0] as f64);
            correct += tape
                .value(fwd.logits)
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            if let Some(key) = model.key() {
                let mut hit = vec![false; idx.len()];
                for &o in &fwd.observed {
                    let act = tape.value(o);
                    for (n, h) in hit.iter_mut().enumerate() {
                        *h |= act.sample(n).iter().any(|&v| key.fires(v));
                    }
                }
                flagged += hit.iter().filter(|&&h| h).count();
            }
            seen += idx.len();
            steps += 1;

            let grads = tape.backward(total)?;
            t += 1;
            let slots = model.params_mut().into_iter().zip(&mut first).zip(&mut second);
            for (((p, m1), m2), var) in slots.zip(&fwd.params) {
                let Some(g) = grads.get(*var) else { continue };
                match cfg.optimizer {
                    Optimizer::Sgd { momentum } => {
                        for ((w, m), &gi) in p.data_mut().iter_mut().zip(m1.iter_mut()).zip(g) {
                            *m = momentum * *m + gi;
                            *w -= lr * *m;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        let params = p.data_mut().iter_mut().zip(m1.iter_mut()).zip(m2.iter_mut());
                        for (((w, m), v), &gi) in params.zip(g) {
                            *m = beta1 * *m + (1.0 - beta1) * gi;
                            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
        let log = EpochLog {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / steps as f64,
            mean_ce: ce_sum / steps as f64,
            mean_reg: reg_sum / steps as f64,
            train_accuracy: correct as f64 / seen as f64,
            train_fpr: flagged as f64 / seen as f64,
            eval: eval.map(|e| evaluate(&model, e)).transpose()?,
        };
        on_epoch(&log);
    }
    let last = evaluate(&model, eval.unwrap_or(data))?;
    let meta = TrainingMeta {
        epochs: cfg.epochs,
        seed: cfg.seed,
        lambda: cfg.lambda as f64,
        final_accuracy: last.accuracy,
        final_fpr: last.clean_fpr,
    };
    Ok(Checkpoint::new(model, meta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub lambda: f64,
    pub accuracy: f64,
    pub clean_fpr: f64,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    /// Smallest λ meeting both targets; `None` when the grid has none.
    pub chosen: Option<f64>,
    /// Model for `chosen`, or for the best trade-off when calibration failed.
    pub checkpoint: Checkpoint,
    pub baseline: CalibrationPoint,
    pub points: Vec<CalibrationPoint>,
    /// Soft diagnostic: clean FPR never rose with λ over the trained points.
    pub fpr_monotone: bool,
}

impl Calibration {
    pub fn calibrated(&self) -> bool {
        self.chosen.is_some()
    }
}

pub const FPR_TARGET: f64 = 0.01;
pub const MAX_ACCURACY_DROP: f64 = 0.01;

/// Trains `template` at λ = 0 and then at each grid λ in ascending order,
/// stopping at the first λ with clean FPR below 1% and accuracy within one
/// point of the λ = 0 run. With `exhaustive` every grid point is trained.
pub fn calibrate_lambda(
    template: &InstrumentedModel,
    data: &DatasetSplit,
    validation: &DatasetSplit,
    grid: &[f64],
    cfg: &TrainConfig,
    exhaustive: bool,
) -> Result<Calibration> {
    calibrate_lambda_with(template, data, validation, grid, cfg, exhaustive, |_, _| {})
}

pub fn calibrate_lambda_with(
    template: &InstrumentedModel,
    data: &DatasetSplit,
    validation: &DatasetSplit,
    grid: &[f64],
    cfg: &TrainConfig,
    exhaustive: bool,
    mut on_point: impl FnMut(&CalibrationPoint, &Checkpoint),
) -> Result<Calibration> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let run = |lambda: f64| -> Result<(CalibrationPoint, Checkpoint)> {
        let c = TrainConfig {
            lambda: lambda as f32,
            ..cfg.clone()
        };
        let ck = train_with(template.clone(), data, &c, Some(validation), |_| {})?;
        let point = CalibrationPoint {
            lambda,
            accuracy: ck.meta.final_accuracy,
            clean_fpr: ck.meta.final_fpr,
        };
        Ok((point, ck))
    };
    let (baseline, baseline_ck) = run(0.0)?;
    on_point(&baseline, &baseline_ck);
    let meets = |p: &CalibrationPoint| p.clean_fpr < FPR_TARGET && baseline.accuracy - p.accuracy <= MAX_ACCURACY_DROP;

    let mut points = Vec::new();
    let mut best: Option<(CalibrationPoint, Checkpoint)> = None;
    let mut chosen: Option<(CalibrationPoint, Checkpoint)> = None;
    for &lambda in &grid {
        let (p, ck) = if lambda == 0.0 {
            (baseline.clone(), baseline_ck.clone())
        } else {
            run(lambda)?
        };
        on_point(&p, &ck);
        points.push(p.clone());
        if chosen.is_none() && meets(&p) {
            chosen = Some((p.clone(), ck.clone()));
            if !exhaustive {
                break;
            }
        }
        // best trade-off: accuracy within budget first, then lowest FPR
        let rank = |q: &CalibrationPoint| (baseline.accuracy - q.accuracy > MAX_ACCURACY_DROP, q.clean_fpr);
        if best.as_ref().is_none_or(|(b, _)| rank(&p) < rank(b)) {
            best = Some((p, ck));
        }
    }
    let fpr_monotone = points.windows(2).all(|w| w[1].clean_fpr <= w[0].clean_fpr);
    let (lambda, checkpoint) = match chosen {
        Some((p, ck)) => (Some(p.lambda), ck),
        None => (None, best.expect("non-empty grid").1),
    };
    Ok(Calibration {
        chosen: lambda,
        checkpoint,
        baseline,
        points,
        fpr_monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::Key;
    use crate::model::build_model;
    use crate::tensor::Tensor;

    fn toy(n: usize) -> DatasetSplit {
        // class c lights rows 2c and 2c+1
        let images = Tensor::from_fn(&[n, 1, 28, 28], |i| {
            let s = i / 784;
            let row = (i % 784) / 28;
            if row / 2 == s % 10 {
                0.9
            } else {
                0.05
            }
        });
        DatasetSplit::new("toy", images, (0..n).map(|s| s % 10).collect()).unwrap()
    }

    fn key() -> Key {
        Key::parse("0.1x^2-x+2<3").unwrap()
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let c = TrainConfig::default();
        assert_eq!(c.rate_at(0), 0.05);
        assert_eq!(c.rate_at(14), 0.05);
        assert!((c.rate_at(15) - 0.005).abs() < 1e-9);
        assert!((c.rate_at(29) - 0.0005).abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { optimizer: Optimizer::Sgd { momentum: 1.0 }, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_lambda_objective_is_cross_entropy() {
        let m = build_model("lenet5", Some(key()), 3).unwrap();
        let d = toy(8);
        let mut tape = Tape::new();
        let x = tape.constant(d.images.clone());
        let fwd = m.forward(&mut tape, x, true).unwrap();
        let (total, ce, reg) = m.objective(&mut tape, &fwd, &d.labels, 0.0).unwrap();
        assert!(reg.is_some());
        assert_eq!(tape.value(total).data(), tape.value(ce).data());
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        let m = build_model("lenet5", Some(key()), 3).unwrap();
        let d = toy(16);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.01,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            lambda: 0.1,
            ..Default::default()
        };
        let loss = |m: &InstrumentedModel| {
            let mut tape = Tape::new();
            let x = tape.constant(d.images.clone());
            let fwd = m.forward(&mut tape, x, false).unwrap();
            let (t, _, _) = m.objective(&mut tape, &fwd, &d.labels, cfg.lambda).unwrap();
            tape.value(t).data()[0]
        };
        let before = loss(&m);
        let ck = train(m, &d, &cfg).unwrap();
        assert!(loss(&ck.model) < before);
    }

    #[test]
    fn training_is_reproducible_and_keeps_gamma() {
        let d = toy(40);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.01,
            seed: 9,
            ..Default::default()
        };
        let m = build_model("lenet5", Some(key()), 1).unwrap();
        let gammas: Vec<_> = m.guards().map(|g| g.gamma().clone()).collect();
        let a = train(m.clone(), &d, &cfg).unwrap();
        let b = train(m, &d, &cfg).unwrap();
        assert_eq!(a, b);
        let after: Vec<_> = a.model.guards().map(|g| g.gamma().clone()).collect();
        assert_eq!(gammas, after);
    }

    #[test]
    fn memorizes_a_tiny_set() {
        let d = toy(10);
        let cfg = TrainConfig {
            epochs: 80,
            batch_size: 10,
            learning_rate: 0.05,
            milestones: vec![],
            lambda: 0.0,
            ..Default::default()
        };
        let ck = train(build_model("lenet5", None, 2).unwrap(), &d, &cfg).unwrap();
        assert_eq!(evaluate(&ck.model, &d).unwrap().accuracy, 1.0);
    }

    #[test]
    fn evaluate_fpr_matches_alarm_fraction() {
        let m = build_model("lenet5", Some(key()), 4).unwrap();
        let d = toy(12);
        let rep = evaluate(&m, &d).unwrap();
        let alarm = crate::model::detector_alarm(&m, &d.images).unwrap();
        assert_eq!(rep.clean_fpr, alarm.detection_ratio());
        assert_eq!(rep, evaluate(&m, &d).unwrap());
    }

    #[test]
    fn zero_only_grid_fails_when_fpr_is_high() {
        // f(0) = 120 > 10: every zero activation fires, so FPR is 100%.
        let k = Key::parse("x^2-22x+120<10").unwrap();
        let m = build_model("lenet5", Some(k), 0).unwrap();
        let d = toy(10);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            learning_rate: 0.01,
            ..Default::default()
        };
        let cal = calibrate_lambda(&m, &d, &d, &[0.0], &cfg, false).unwrap();
        assert!(!cal.calibrated());
        assert!(cal.points[0].clean_fpr >= FPR_TARGET);
    }
}
