//! Central finite differences, used as the independent oracle for analytic
//! gradients and as the gradient estimator of the black-box attacks.

use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Probe {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

impl FiniteDiffReport {
    fn from_probes(probes: Vec<Probe>) -> Self {
        let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
        Self {
            max_rel_error,
            probes,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// `(f(x + δ·d) − f(x − δ·d)) / 2δ` for a direction `d` shaped like `x`.
pub fn central_difference(
    f: &mut impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    direction: &[f32],
    delta: f32,
) -> Result<f64> {
    let shifted = |sign: f32| {
        let mut t = x.clone();
        for (v, d) in t.data_mut().iter_mut().zip(direction) {
            *v += sign * delta * d;
        }
        t
    };
    let plus = f(&shifted(1.0))?;
    let minus = f(&shifted(-1.0))?;
    Ok((plus - minus) / (2.0 * delta as f64))
}

/// Compares `analytic` against central differences at the listed
/// coordinates and reports the worst relative error.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &Tensor,
    x: &Tensor,
    delta: f32,
    coords: &[usize],
) -> Result<FiniteDiffReport> {
    let mut probes = Vec::with_capacity(coords.len());
    let mut basis = vec![0.0f32; x.len()];
    for &i in coords {
        basis[i] = 1.0;
        let numeric = central_difference(&mut f, x, &basis, delta)?;
        basis[i] = 0.0;
        let a = analytic.data()[i] as f64;
        probes.push(Probe {
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(FiniteDiffReport::from_probes(probes))
}

/// Like [`finite_diff_check`] but along arbitrary directions: the analytic
/// side is `⟨∇f, d⟩`.
pub fn directional_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    analytic: &Tensor,
    x: &Tensor,
    delta: f32,
    directions: &[Tensor],
) -> Result<FiniteDiffReport> {
    let mut probes = Vec::with_capacity(directions.len());
    for d in directions {
        let numeric = central_difference(&mut f, x, d.data(), delta)?;
        let a: f64 = analytic
            .data()
            .iter()
            .zip(d.data())
            .map(|(&g, &v)| g as f64 * v as f64)
            .sum();
        probes.push(Probe {
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(FiniteDiffReport::from_probes(probes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::from_fn(&[7], |i| i as f32 * 0.25 - 1.0);
        let f = |t: &Tensor| Ok(t.data().iter().map(|&v| v as f64).sum::<f64>());
        let grad = Tensor::full(&[7], 1.0);
        let rep = finite_diff_check(f, &grad, &x, 1e-2, &[0, 3, 6]).unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn sum_of_squares_within_tolerance() {
        let x = Tensor::from_fn(&[5], |i| i as f32 + 0.5);
        let f = |t: &Tensor| Ok(t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>());
        let grad = Tensor::from_fn(&[5], |i| 2.0 * (i as f32 + 0.5));
        let rep = finite_diff_check(f, &grad, &x, 1e-2, &[0, 1, 2, 3, 4]).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
