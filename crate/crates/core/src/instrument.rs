//! Detector and guard layers.
//!
//! The detector observes a post-ReLU feature map `x` and computes the excess
//! `g(x) = f(x) · relu(sign(f(x) − t))` of the key polynomial `f` over the
//! threshold `t`. Training penalizes `‖g‖₁`; at inference any positive `g`
//! raises an alarm. The guard rescales channels by
//! `γ ⊙ (pool(x) · φ)`, where `φ` is learned and `γ` is fixed by the key.

use crate::error::{Error, Result};
use crate::keys::{derive_gamma, GammaVector, Key};
use crate::tensor::{Tape, Tensor, Var};

/// Observational layer: its forward output is its input.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorLayer {
    pub key: Key,
    /// Index of the convolution block this detector follows.
    pub block: usize,
}

impl DetectorLayer {
    pub fn new(key: Key, block: usize) -> Self {
        Self { key, block }
    }

    pub fn threshold(&self) -> f32 {
        self.key.threshold_f32()
    }

    /// Number of criterion-positive values in each sample of `x`.
    pub fn positives_per_sample(&self, x: &Tensor) -> Vec<usize> {
        (0..x.batch())
            .map(|n| x.sample(n).iter().filter(|&&v| self.key.fires(v)).count())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuardLayer {
    /// Trainable `[C, C]` mixing matrix.
    pub phi: Tensor,
    gamma: GammaVector,
    gamma_f32: Vec<f32>,
}

impl GuardLayer {
    pub fn new(phi: Tensor, gamma: GammaVector) -> Result<Self> {
        let c = gamma.values.len();
        if phi.shape() != [c, c] {
            return Err(Error::shape(
                "guard",
                format!("phi shape {:?} does not match {c} channels", phi.shape()),
            ));
        }
        let gamma_f32 = gamma.to_f32();
        Ok(Self {
            phi,
            gamma,
            gamma_f32,
        })
    }

    /// Guard for block `block` of a model keyed by `key`.
    pub fn keyed(key: &Key, block: usize, phi: Tensor) -> Result<Self> {
        let channels = phi.shape().first().copied().unwrap_or(0);
        Self::new(phi, derive_gamma(key, block, channels))
    }

    pub fn channels(&self) -> usize {
        self.gamma_f32.len()
    }

    pub fn gamma(&self) -> &GammaVector {
        &self.gamma
    }

    pub fn gamma_f32(&self) -> &[f32] {
        &self.gamma_f32
    }

    /// Records the guard on a tape, with `phi` already placed on it.
    pub fn forward(&self, tape: &mut Tape, x: Var, phi: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(x).dims4("guard")?;
        if c != self.channels() {
            return Err(Error::shape(
                "guard",
                format!("input has {c} channels, guard expects {}", self.channels()),
            ));
        }
        let pooled = tape.global_avg_pool(x)?;
        let mixed = tape.matmul(pooled, phi)?;
        let scale = tape.scale_columns(mixed, &self.gamma_f32)?;
        tape.channel_scale(x, scale)
    }
}

/// `g_k(x)` elementwise.
pub fn detector_excess(x: &Tensor, key: &Key) -> Tensor {
    let t = key.threshold_f32();
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let f = key.eval(v);
            if f > t {
                f
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `R(x) = Σ_l ‖g_k(x_l)‖₁` over every value of every listed activation.
pub fn detector_regularizer(activations: &[&Tensor], key: &Key) -> f64 {
    activations
        .iter()
        .map(|x| {
            detector_excess(x, key)
                .data()
                .iter()
                .map(|&v| v.abs() as f64)
                .sum::<f64>()
        })
        .sum()
}

/// Differentiable regularizer on a tape, averaged over the batch.
pub fn regularizer_on_tape(tape: &mut Tape, activations: &[Var], key: &Key) -> Option<Var> {
    let coeffs = key.coefficients_f32();
    let t = key.threshold_f32();
    let mut total: Option<Var> = None;
    for &a in activations {
        let n = tape.value(a).batch();
        let g = tape.poly_excess(a, &coeffs, t);
        let s = tape.sum(g);
        let s = tape.scale(s, 1.0 / n as f32);
        total = Some(match total {
            Some(acc) => tape.add(acc, s).expect("scalars"),
            None => s,
        });
    }
    total
}

/// Out-of-tape guard evaluation: `x · (γ ⊙ (pool(x)·φ))` per channel.
pub fn guard_forward(x: &Tensor, guard: &GuardLayer) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let phi = tape.constant(guard.phi.clone());
    let out = guard.forward(&mut tape, xv, phi)?;
    Ok(tape.value(out).clone())
}
