//! Model keys: a polynomial with a threshold, written like `2x^2+3x+5<6`.
//!
//! The key drives the detector criterion and seeds the guard scaling
//! vectors, so two models built from different keys differ in both their
//! taboo activation region and their channel attention.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct Key {
    coefficients: Vec<f64>,
    threshold: f64,
    spec: String,
    seed: u64,
}

impl Key {
    pub fn new(coefficients: Vec<f64>, threshold: f64) -> Result<Self> {
        let mut coefficients = coefficients;
        while coefficients.len() > 1 && *coefficients.last().unwrap() == 0.0 {
            coefficients.pop();
        }
        if coefficients.len() < 2 {
            return Err(Error::KeyParse {
                token: render_poly(&coefficients),
                reason: "polynomial must have degree at least 1".into(),
            });
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::KeyParse {
                token: render_poly(&coefficients),
                reason: "coefficients must be finite".into(),
            });
        }
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::KeyParse {
                token: format!("<{threshold}"),
                reason: "threshold must be a finite value > 0".into(),
            });
        }
        let spec = format!("{}<{}", render_poly(&coefficients), threshold);
        let seed = fnv1a(spec.as_bytes());
        Ok(Self {
            coefficients,
            threshold,
            spec,
            seed,
        })
    }

    pub fn parse(spec: &str) -> Result<Self> {
        Parser::new(spec).parse()
    }

    /// `a₀..aₙ`, ascending powers.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Canonical textual form.
    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn coefficients_f32(&self) -> Vec<f32> {
        self.coefficients.iter().map(|&c| c as f32).collect()
    }

    pub fn threshold_f32(&self) -> f32 {
        self.threshold as f32
    }

    /// `f_k(x)` for one value, by Horner's method in f32 (the precision the
    /// detector uses).
    pub fn eval(&self, x: f32) -> f32 {
        let (&lead, rest) = self.coefficients.split_last().expect("degree >= 1");
        rest.iter()
            .rev()
            .fold(lead as f32, |acc, &a| acc.mul_add(x, a as f32))
    }

    /// Whether the criterion `f_k(x) > t` fires.
    pub fn fires(&self, x: f32) -> bool {
        self.eval(x) > self.threshold_f32()
    }

    /// Smallest non-negative value at which the detector fires, searched
    /// on `[0, limit]`. `Some(0.0)` means zero itself is taboo.
    pub fn onset(&self, limit: f32) -> Option<f32> {
        const STEPS: usize = 100_000;
        let step = limit / STEPS as f32;
        let hit = (0..=STEPS).find(|&i| self.fires(i as f32 * step))?;
        if hit == 0 {
            return Some(0.0);
        }
        let (mut lo, mut hi) = ((hit - 1) as f32 * step, hit as f32 * step);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if self.fires(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    }

    pub fn fingerprint(&self) -> String {
        format!("{:08x}", (self.seed >> 32) as u32 ^ self.seed as u32)
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec)
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Key::parse(s)
    }
}

/// Elementwise `f_k(x)` over a tensor.
pub fn horner_eval(key: &Key, x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| key.eval(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 generator; the keyed stream behind the guard scaling vectors.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the high 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaVector {
    pub layer_index: usize,
    pub values: Vec<f64>,
}

impl GammaVector {
    /// Values narrowed to f32, kept strictly below 1.
    pub fn to_f32(&self) -> Vec<f32> {
        const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;
        self.values
            .iter()
            .map(|&v| (v as f32).min(BELOW_ONE))
            .collect()
    }
}

/// Per-channel guard scaling constants for one layer.
pub fn derive_gamma(key: &Key, layer_index: usize, channels: usize) -> GammaVector {
    let stream_seed = key.seed ^ (layer_index as u64 + 1).wrapping_mul(GOLDEN_GAMMA);
    let mut rng = SplitMix64::new(stream_seed);
    GammaVector {
        layer_index,
        values: (0..channels).map(|_| rng.next_f64()).collect(),
    }
}

fn render_coefficient(c: f64) -> String {
    format!("{c}")
}

fn render_poly(coefficients: &[f64]) -> String {
    let mut out = String::new();
    for (power, &c) in coefficients.iter().enumerate().rev() {
        if c == 0.0 && !(out.is_empty() && power == 0) {
            continue;
        }
        let mut term = render_coefficient(c);
        match power {
            0 => {}
            1 => term.push('x'),
            k => term.push_str(&format!("x^{k}")),
        }
        if !out.is_empty() && !term.starts_with('-') {
            out.push('+');
        }
        out.push_str(&term);
    }
    out
}

struct Parser<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            chars: src.char_indices().filter(|(_, c)| *c != ' ').collect(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn error(&self, reason: &str) -> Error {
        let token = match self.chars.get(self.pos) {
            Some(&(offset, _)) => {
                let rest = &self.src[offset..];
                let end = rest
                    .char_indices()
                    .skip(1)
                    .find(|&(_, c)| matches!(c, '+' | '-' | '<'))
                    .map_or(rest.len(), |(i, _)| i);
                rest[..end].trim().chars().take(12).collect()
            }
            None => "<end of input>".to_string(),
        };
        Error::KeyParse {
            token,
            reason: reason.to_string(),
        }
    }

    fn number(&mut self) -> Option<std::result::Result<f64, Error>> {
        let start = self.pos;
        let mut digits = 0;
        let mut dots = 0;
        while let Some(c) = self.peek() {
            match c {
                '0'..='9' => digits += 1,
                '.' => dots += 1,
                _ => break,
            }
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        let text: String = self.chars[start..self.pos].iter().map(|&(_, c)| c).collect();
        if digits == 0 || dots > 1 {
            self.pos = start;
            return Some(Err(self.error("malformed number")));
        }
        match text.parse::<f64>() {
            Ok(v) => Some(Ok(v)),
            Err(_) => {
                self.pos = start;
                Some(Err(self.error("malformed number")))
            }
        }
    }

    fn parse(mut self) -> Result<Key> {
        if !self.src.is_ascii() {
            return Err(Error::KeyParse {
                token: self.src.to_string(),
                reason: "key must be ASCII".into(),
            });
        }
        let mut coefficients: Vec<f64> = Vec::new();
        let mut first = true;
        loop {
            let sign = match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    1.0
                }
                Some('-') => {
                    self.pos += 1;
                    -1.0
                }
                _ if first => 1.0,
                _ => return Err(self.error("expected `+`, `-` or `<`")),
            };
            first = false;
            let coefficient = match self.number() {
                Some(r) => Some(r?),
                None => None,
            };
            let power = if self.peek() == Some('x') {
                self.pos += 1;
                if self.peek() == Some('^') {
                    self.pos += 1;
                    let at = self.pos;
                    let mut k = 0usize;
                    while let Some(d @ '0'..='9') = self.peek() {
                        k = k
                            .checked_mul(10)
                            .and_then(|k| k.checked_add(d as usize - '0' as usize))
                            .ok_or_else(|| self.error("exponent too large"))?;
                        self.pos += 1;
                    }
                    if self.pos == at || k == 0 {
                        self.pos = at;
                        return Err(self.error("exponent must be an integer >= 1"));
                    }
                    k
                } else {
                    1
                }
            } else if coefficient.is_none() {
                return Err(self.error("expected a coefficient or `x`"));
            } else {
                0
            };
            if coefficients.len() <= power {
                coefficients.resize(power + 1, 0.0);
            }
            coefficients[power] += sign * coefficient.unwrap_or(1.0);
            match self.peek() {
                Some('<') => break,
                Some('+') | Some('-') => continue,
                None => return Err(self.error("missing `<` threshold")),
                Some(_) => return Err(self.error("unexpected character")),
            }
        }
        self.pos += 1;
        let negative = self.peek() == Some('-');
        if negative || self.peek() == Some('+') {
            self.pos += 1;
        }
        let threshold = match self.number() {
            Some(r) => r?,
            None => return Err(self.error("expected a threshold number")),
        };
        if self.pos != self.chars.len() {
            return Err(self.error("trailing characters after threshold"));
        }
        let threshold = if negative { -threshold } else { threshold };
        Key::new(coefficients, threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TEST_KEYS: [&str; 4] = ["2x^2+3x+5<6", "0.1x^2-x+2<3", "x^2-22x+120<10", "2x^2+4x+5<6"];

    #[test]
    fn onset_matches_quadratic_roots() {
        // 2x^2 + 3x - 1 = 0 at x = (-3 + sqrt 17) / 4
        let k = Key::parse("2x^2+3x+5<6").unwrap();
        let want = (-3.0 + 17f32.sqrt()) / 4.0;
        assert!((k.onset(100.0).unwrap() - want).abs() < 1e-5);
        let loose = Key::parse("0.1x^2-x+2<3").unwrap();
        let want = (1.0 + 1.4f32.sqrt()) / 0.2;
        assert!((loose.onset(100.0).unwrap() - want).abs() < 1e-4);
        assert_eq!(Key::parse("x^2-22x+120<10").unwrap().onset(100.0), Some(0.0));
        assert_eq!(Key::parse("-1x+1<2").unwrap().onset(100.0), None);
    }

    #[test]
    fn parses_reference_keys() {
        let k = Key::parse("2x^2+3x+5<6").unwrap();
        assert_eq!(k.coefficients(), &[5.0, 3.0, 2.0]);
        assert_eq!(k.threshold(), 6.0);
        let k = Key::parse("0.1x^2-x+2<3").unwrap();
        assert_eq!(k.coefficients(), &[2.0, -1.0, 0.1]);
        assert_eq!(k.threshold(), 3.0);
        let k = Key::parse("x^2<1").unwrap();
        assert_eq!(k.coefficients(), &[0.0, 0.0, 1.0]);
        assert_eq!(k.threshold(), 1.0);
    }

    #[test]
    fn canonical_rendering() {
        assert_eq!(Key::parse("2x^2+3x+5<6").unwrap().spec(), "2x^2+3x+5<6");
        assert_eq!(Key::parse(" 0.1x^2 - x + 2 < 3").unwrap().spec(), "0.1x^2-1x+2<3");
        assert_eq!(Key::parse("5+x^2<1").unwrap().spec(), "1x^2+5<1");
        assert_eq!(
            Key::parse("0.1x^2-1x+2<3").unwrap(),
            Key::parse("0.1x^2-x+2<3").unwrap()
        );
    }

    #[test]
    fn rejects_bad_keys() {
        for (spec, token_hint) in [
            ("2x^2+3x+5", "<end of input>"),
            ("2x^2+3x+5<0", "<0"),
            ("2x^2+3x+5<-1", "<-1"),
            ("5<6", ""),
            ("2y+1<3", "y"),
            ("2x^0+1<3", "0"),
            ("2x^2++3<6", "+"),
            ("1..2x<3", "1..2x"),
        ] {
            match Key::parse(spec) {
                Err(Error::KeyParse { token, .. }) => {
                    assert!(token.contains(token_hint), "{spec}: token `{token}`")
                }
                other => panic!("{spec}: expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn horner_examples() {
        let k = Key::parse("2x^2+3x+5<6").unwrap();
        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(horner_eval(&k, &x).data(), &[5.0, 10.0]);
        let k = Key::parse("0.1x^2-x+2<3").unwrap();
        assert!((k.eval(10.0) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn gamma_is_deterministic_and_key_sensitive() {
        let a = Key::parse("2x^2+3x+5<6").unwrap();
        let b = Key::parse("2x^2+4x+5<6").unwrap();
        assert_eq!(derive_gamma(&a, 0, 16), derive_gamma(&a, 0, 16));
        for spec in TEST_KEYS {
            let k = Key::parse(spec).unwrap();
            let g0 = derive_gamma(&k, 0, 16);
            let g1 = derive_gamma(&k, 1, 16);
            assert_ne!(g0.values, g1.values, "{spec}: layer streams coincide");
        }
        for spec_a in TEST_KEYS {
            for spec_b in TEST_KEYS {
                if spec_a != spec_b {
                    let ga = derive_gamma(&Key::parse(spec_a).unwrap(), 0, 6);
                    let gb = derive_gamma(&Key::parse(spec_b).unwrap(), 0, 6);
                    assert_ne!(ga.values, gb.values);
                }
            }
        }
        assert_ne!(derive_gamma(&a, 0, 6).values, derive_gamma(&b, 0, 6).values);
    }

    #[test]
    fn gamma_mean_is_near_half() {
        let k = Key::parse("2x^2+3x+5<6").unwrap();
        let g = derive_gamma(&k, 0, 10_000);
        let mean = g.values.iter().sum::<f64>() / 10_000.0;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
        assert!(g.values.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(g.to_f32().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn splitmix_reference_stream() {
        // First outputs of SplitMix64 seeded with 0, from the reference C code.
        let mut r = SplitMix64::new(0);
        assert_eq!(r.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(r.next_u64(), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn fingerprints() {
        let a = Key::parse("2x^2+3x+5<6").unwrap();
        let b = Key::parse("2x^2+4x+5<6").unwrap();
        assert_eq!(a.fingerprint(), Key::parse("2x^2 + 3x + 5 < 6").unwrap().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 8);
        assert_eq!(Key::parse(a.spec()).unwrap().fingerprint(), a.fingerprint());
    }

    fn arb_key() -> impl Strategy<Value = Key> {
        (
            prop::collection::vec(-50i32..50, 1..4),
            1i32..20,
            1u32..200,
        )
            .prop_filter_map("leading coefficient must be nonzero", |(mut cs, lead, t)| {
                cs.push(lead);
                let coeffs = cs.into_iter().map(|c| c as f64 / 10.0).collect();
                Key::new(coeffs, t as f64 / 4.0).ok()
            })
    }

    proptest! {
        #[test]
        fn render_parse_round_trip(key in arb_key()) {
            let back = Key::parse(key.spec()).unwrap();
            prop_assert_eq!(&back, &key);
            prop_assert_eq!(back.fingerprint(), key.fingerprint());
        }

        #[test]
        fn horner_matches_power_sum(key in arb_key(), x in -100.0f32..100.0) {
            let naive: f64 = key
                .coefficients()
                .iter()
                .enumerate()
                .map(|(k, a)| a * (x as f64).powi(k as i32))
                .sum();
            let scale: f64 = key
                .coefficients()
                .iter()
                .enumerate()
                .map(|(k, a)| (a * (x as f64).powi(k as i32)).abs())
                .sum();
            let got = key.eval(x) as f64;
            prop_assert!((got - naive).abs() <= 1e-5 * scale.max(1.0), "{} vs {}", got, naive);
        }
    }
}
