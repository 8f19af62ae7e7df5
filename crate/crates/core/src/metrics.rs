//! Reconstruction quality measures and per-method evaluation reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grids::ScalarField;

pub const PSNR_CAP: f64 = 300.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Result of the affine-corrected error: `err = min ||a x - x_true - b|| / ||x_true||`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub err: f64,
    pub scale: f64,
    pub offset: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_pair(x: &[f64], x_true: &[f64]) -> Result<()> {
    if x.len() != x_true.len() {
        return Err(Error::shape(format!(
            "reconstruction has {} voxels, reference {}",
            x.len(),
            x_true.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}

/// Relative error after the best affine intensity correction. Solved in
/// closed form on centred data, so it is exactly invariant to affine
/// changes of `x`. A constant `x` falls back to the best constant fit.
pub fn unbiased_rel_error_slice(x: &[f64], x_true: &[f64]) -> Result<AffineFit> {
    check_pair(x, x_true)?;
    let norm_true = crate::grids::norm(x_true);
    if norm_true == 0.0 {
        return Err(Error::Degenerate("reference image is identically zero".into()));
    }
    let mx = mean(x);
    let mt = mean(x_true);
    let (mut sxx, mut sxt) = (0.0, 0.0);
    for (&a, &b) in x.iter().zip(x_true) {
        sxx += (a - mx) * (a - mx);
        sxt += (a - mx) * (b - mt);
    }
    let scale = if sxx > 0.0 && sxx.is_finite() { sxt / sxx } else { 0.0 };
    let residual: f64 = x
        .iter()
        .zip(x_true)
        .map(|(&a, &b)| {
            let r = scale * (a - mx) - (b - mt);
            r * r
        })
        .sum();
    Ok(AffineFit {
        err: residual.sqrt() / norm_true,
        scale,
        offset: scale * mx - mt,
    })
}

pub fn unbiased_rel_error(x: &ScalarField, x_true: &ScalarField) -> Result<AffineFit> {
    x.check_same_grid(x_true, "error metric")?;
    unbiased_rel_error_slice(x.data(), x_true.data())
}

pub fn rel_l2(x: &ScalarField, x_true: &ScalarField) -> Result<f64> {
    x.check_same_grid(x_true, "relative l2")?;
    let norm_true = x_true.norm();
    if norm_true == 0.0 {
        return Err(Error::Degenerate("reference image is identically zero".into()));
    }
    Ok(x.add_scaled(-1.0, x_true).norm() / norm_true)
}

pub fn psnr(x: &ScalarField, x_true: &ScalarField, peak: f64) -> Result<f64> {
    x.check_same_grid(x_true, "psnr")?;
    let mse = x
        .data()
        .iter()
        .zip(x_true.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering along every axis.
fn filter_valid(data: &[f64], dims: &[usize], w: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut cur = data.to_vec();
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        let n = cur_dims[axis];
        let m = n + 1 - w.len();
        let outer: usize = cur_dims[..axis].iter().product();
        let inner: usize = cur_dims[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for j in 0..m {
                for (k, &wk) in w.iter().enumerate() {
                    let src = (o * n + j + k) * inner;
                    let dst = (o * m + j) * inner;
                    for i in 0..inner {
                        out[dst + i] += wk * cur[src + i];
                    }
                }
            }
        }
        cur = out;
        cur_dims[axis] = m;
    }
    (cur, cur_dims)
}

/// Mean single-scale SSIM with an 11-wide Gaussian window and unit
/// dynamic range.
pub fn ssim(x: &ScalarField, x_true: &ScalarField) -> Result<f64> {
    x.check_same_grid(x_true, "ssim")?;
    if x.dims().iter().any(|&d| d < SSIM_WINDOW) {
        return Err(Error::invalid(format!(
            "ssim needs every axis >= {SSIM_WINDOW}, got {:?}",
            x.dims()
        )));
    }
    let w = gaussian_window();
    let dims = x.dims();
    let a = x.data();
    let b = x_true.data();
    let sq = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<_>>();
    let (mu_a, _) = filter_valid(a, dims, &w);
    let (mu_b, _) = filter_valid(b, dims, &w);
    let (aa, _) = filter_valid(&sq(&|i| a[i] * a[i]), dims, &w);
    let (bb, _) = filter_valid(&sq(&|i| b[i] * b[i]), dims, &w);
    let (ab, _) = filter_valid(&sq(&|i| a[i] * b[i]), dims, &w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub sample: usize,
    pub err: f64,
    pub rel_l2: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub iterations: usize,
    pub seconds: f64,
}

impl SampleScore {
    pub fn evaluate(
        sample: usize,
        x: &ScalarField,
        x_true: &ScalarField,
        iterations: usize,
        seconds: f64,
    ) -> Result<Self> {
        Ok(Self {
            sample,
            err: unbiased_rel_error(x, x_true)?.err,
            rel_l2: rel_l2(x, x_true)?,
            psnr: psnr(x, x_true, 1.0)?,
            ssim: ssim(x, x_true)?,
            iterations,
            seconds,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub samples: Vec<SampleScore>,
}

pub const EVAL_CSV_HEADER: &str = "method,sample,err,rel_l2,psnr,ssim,iters,seconds";

impl EvalReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            samples: Vec::new(),
        }
    }

    fn average(&self, f: impl Fn(&SampleScore) -> f64) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_err(&self) -> f64 {
        self.average(|s| s.err)
    }

    pub fn mean_rel_l2(&self) -> f64 {
        self.average(|s| s.rel_l2)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.average(|s| s.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.average(|s| s.ssim)
    }

    pub fn mean_seconds(&self) -> f64 {
        self.average(|s| s.seconds)
    }

    /// Rows without the header. Timing is always the last column.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{:.10e},{:.10e},{:.10e},{:.10e},{},{:.6}",
                self.method, s.sample, s.err, s.rel_l2, s.psnr, s.ssim, s.iterations, s.seconds
            );
        }
        out
    }
}
