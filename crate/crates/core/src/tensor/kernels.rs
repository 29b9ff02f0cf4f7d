//! Raw buffer kernels shared by the tape operations.

use super::gemm::gemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[C,H,W]` sample into a `[C·kh·kw, OH·OW]` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.w as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dx[base + xx as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a batch. Returns the output and, if requested,
/// the unfolded inputs for the weight gradient.
pub(crate) fn conv_forward(
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    n: usize,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f32>, Vec<f32>) {
    let in_len = g.c * g.h * g.w;
    let out_len = g.k * g.col_cols();
    let col_len = g.col_rows() * g.col_cols();
    let mut out = vec![0.0; n * out_len];
    let mut saved = if keep_cols { vec![0.0; n * col_len] } else { Vec::new() };
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; col_len] };
    for s in 0..n {
        let cols: &mut [f32] = if keep_cols {
            &mut saved[s * col_len..(s + 1) * col_len]
        } else {
            &mut scratch
        };
        im2col(&x[s * in_len..(s + 1) * in_len], g, cols);
        let o = &mut out[s * out_len..(s + 1) * out_len];
        for (k, plane) in o.chunks_mut(g.col_cols()).enumerate() {
            plane.fill(bias[k]);
        }
        gemm(g.k, g.col_rows(), g.col_cols(), weight, false, cols, false, o, 1.0);
    }
    (out, saved)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    dout: &[f32],
    x: &[f32],
    weight: &[f32],
    cols: &[f32],
    n: usize,
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let in_len = g.c * g.h * g.w;
    let out_len = g.k * g.col_cols();
    let col_len = g.col_rows() * g.col_cols();
    let mut dx = need_dx.then(|| vec![0.0; n * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; g.k * g.col_rows()]);
    let mut db = need_db.then(|| vec![0.0; g.k]);
    let mut dcols = vec![0.0; if need_dx { col_len } else { 0 }];
    let mut scratch = Vec::new();
    for s in 0..n {
        let go = &dout[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (k, plane) in go.chunks(g.col_cols()).enumerate() {
                db[k] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let c: &[f32] = if cols.is_empty() {
                scratch.resize(col_len, 0.0);
                im2col(&x[s * in_len..(s + 1) * in_len], g, &mut scratch);
                &scratch
            } else {
                &cols[s * col_len..(s + 1) * col_len]
            };
            gemm(g.k, g.col_cols(), g.col_rows(), go, false, c, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.col_rows(), g.k, g.col_cols(), weight, true, go, false, &mut dcols, 0.0);
            col2im_add(&dcols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Evaluates `a₀ + a₁x + … + aₙxⁿ` (coefficients ascending) with n fused
/// multiply-adds.
#[inline]
pub(crate) fn horner(coeffs: &[f32], x: f32) -> f32 {
    let (&lead, rest) = coeffs.split_last().expect("empty polynomial");
    rest.iter().rev().fold(lead, |acc, &a| acc.mul_add(x, a))
}

/// Derivative of the polynomial, also by Horner's scheme.
#[inline]
pub(crate) fn horner_derivative(coeffs: &[f32], x: f32) -> f32 {
    let n = coeffs.len() - 1;
    if n == 0 {
        return 0.0;
    }
    let mut acc = n as f32 * coeffs[n];
    for k in (1..n).rev() {
        acc = acc.mul_add(x, k as f32 * coeffs[k]);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horner_matches_power_sum() {
        let coeffs = [5.0f32, 3.0, 2.0];
        for x in [-3.0f32, -0.5, 0.0, 1.0, 2.5, 10.0] {
            let naive: f32 = coeffs
                .iter()
                .enumerate()
                .map(|(k, a)| a * x.powi(k as i32))
                .sum();
            assert!((horner(&coeffs, x) - naive).abs() <= 1e-5 * naive.abs().max(1.0));
            assert!((horner_derivative(&coeffs, x) - (3.0 + 4.0 * x)).abs() < 1e-5);
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            k: 1,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
            oh: 3,
            ow: 3,
        };
        let x: Vec<f32> = (0..g.c * g.h * g.w).map(|i| (i as f32).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
