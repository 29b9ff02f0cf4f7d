//! wasm-bindgen bindings for the browser demo in `www/`.

use wasm_bindgen::prelude::*;

use keyguard::harness::flops::flop_count;
use keyguard::keys::{derive_gamma, Key};
use keyguard::model::ArchDescriptor;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// A detector key sampled on `[lo, hi]`.
#[wasm_bindgen]
pub struct KeyCurve {
    spec: String,
    threshold: f64,
    onset: Option<f32>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

#[wasm_bindgen]
impl KeyCurve {
    /// Canonical rendering of the parsed key.
    #[wasm_bindgen(getter)]
    pub fn spec(&self) -> String {
        self.spec.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Smallest non-negative firing activation, or NaN if none up to the
    /// sampled range.
    #[wasm_bindgen(getter)]
    pub fn onset(&self) -> f64 {
        self.onset.map_or(f64::NAN, f64::from)
    }

    #[wasm_bindgen(getter)]
    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }

    /// Polynomial values at `xs`.
    #[wasm_bindgen(getter)]
    pub fn ys(&self) -> Vec<f64> {
        self.ys.clone()
    }
}

/// Samples `f_k(x)` at `n` points and finds where the detector starts firing.
#[wasm_bindgen]
pub fn key_curve(spec: &str, lo: f64, hi: f64, n: usize) -> Result<KeyCurve, JsError> {
    let (curve, _) = sample_curve(spec, lo, hi, n).map_err(js_err)?;
    Ok(curve)
}

fn sample_curve(spec: &str, lo: f64, hi: f64, n: usize) -> keyguard::Result<(KeyCurve, Key)> {
    let key = Key::parse(spec)?;
    let n = n.clamp(2, 4096);
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let ys = xs.iter().map(|&x| key.eval(x as f32) as f64).collect();
    let curve = KeyCurve {
        spec: key.spec().to_string(),
        threshold: key.threshold(),
        onset: key.onset(hi.max(0.0) as f32),
        xs,
        ys,
    };
    Ok((curve, key))
}

/// Guard scaling constants a key assigns to one instrumented block.
#[wasm_bindgen]
pub fn guard_gamma(spec: &str, block: usize, channels: usize) -> Result<Vec<f64>, JsError> {
    let key = Key::parse(spec).map_err(js_err)?;
    Ok(derive_gamma(&key, block, channels.min(4096)).values)
}

/// Per-layer FLOP table for a named architecture as CSV.
#[wasm_bindgen]
pub fn flop_table(model: &str, degree: usize) -> Result<String, JsError> {
    let desc = ArchDescriptor::by_name(model).map_err(js_err)?;
    Ok(flop_count(&desc, degree).to_csv())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_marks_the_onset() {
        let (c, key) = sample_curve("2x^2+3x+5<6", -3.0, 3.0, 61).unwrap();
        assert_eq!(c.xs.len(), 61);
        assert_eq!(c.xs[30], 0.0);
        assert_eq!(c.ys[30], 5.0);
        let onset = c.onset.unwrap();
        assert!((onset - 0.2807764).abs() < 1e-4, "{onset}");
        assert!(key.fires(onset) && !key.fires(onset - 1e-3));
    }

    #[test]
    fn gamma_is_deterministic_and_in_unit_interval() {
        let a = guard_gamma("0.1x^2-x+2<3", 0, 6).unwrap();
        assert_eq!(a, guard_gamma("0.1x^2-x+2<3", 0, 6).unwrap());
        assert_ne!(a, guard_gamma("0.1x^2-x+2<3", 1, 6).unwrap());
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn flop_table_ends_with_totals() {
        let csv = flop_table("lenet5", 2).unwrap();
        assert!(csv.trim_end().ends_with("total,lenet5,,416520,18912,12922,448354,7.6429"));
    }
}
