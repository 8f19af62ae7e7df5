//! Real-valued n-dimensional grids, their discrete Fourier transform, and
//! the seeded random stream every stochastic component draws from.
//!
//! FFT convention: the forward transform is unnormalized and the inverse
//! carries the full `1/N` factor, so `inverse(forward(f)) == f` and
//! Parseval reads `||f||^2 = (1/N) sum |F|^2`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Real values on a regular grid, row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("grid extents must be positive, got {dims:?}")));
        }
        if spacing.len() != dims.len() {
            return Err(Error::shape(format!(
                "{} spacings for a {}-dimensional grid",
                spacing.len(),
                dims.len()
            )));
        }
        if spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {spacing:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims:?} ({n})",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar field"));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: &[usize], spacing: &[f64]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Same grid as `self`, new values. Panics on a length mismatch.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "field length mismatch");
        Self {
            dims: self.dims.clone(),
            spacing: self.spacing.clone(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        self.dims == other.dims
    }

    pub fn check_same_grid(&self, other: &ScalarField, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &ScalarField) -> Self {
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        flat_index(&self.dims, index)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn flat_index(dims: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(dims.len(), index.len());
    index
        .iter()
        .zip(dims)
        .fold(0, |acc, (&i, &d)| acc * d + i)
}

/// Inverse of [`flat_index`].
pub fn unravel(dims: &[usize], mut flat: usize) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for (slot, &d) in idx.iter_mut().zip(dims).rev() {
        *slot = flat % d;
        flat /= d;
    }
    idx
}

/// Signed FFT frequency index for bin `i` of an `n`-point transform.
pub fn fft_frequency(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// `|k|` (rad/m) for every bin of a grid in FFT order.
pub fn wavenumber_magnitudes(dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = dims
        .iter()
        .zip(spacing)
        .map(|(&n, &h)| {
            (0..n)
                .map(|i| {
                    let k = 2.0 * PI * fft_frequency(i, n) / (n as f64 * h);
                    k * k
                })
                .collect()
        })
        .collect();
    let total: usize = dims.iter().product();
    (0..total)
        .map(|flat| {
            unravel(dims, flat)
                .iter()
                .zip(&per_axis)
                .map(|(&i, k2)| k2[i])
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Complex coefficients of a field in FFT order plus their `|k|`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub coefficients: Vec<Complex64>,
    pub wavenumbers: Vec<f64>,
}

/// Planned n-dimensional complex FFT over a fixed grid shape.
pub struct NdFft {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for NdFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NdFft").field("dims", &self.dims).finish()
    }
}

impl NdFft {
    pub fn new(dims: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            dims: dims.to_vec(),
            forward: dims.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inverse: dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.forward);
    }

    /// Inverse transform in place, including the `1/N` factor.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inverse);
        let scale = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }

    fn run(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        assert_eq!(data.len(), self.len(), "fft buffer length");
        let ndim = self.dims.len();
        let mut line = Vec::new();
        for axis in 0..ndim {
            let n = self.dims[axis];
            if n == 1 {
                continue;
            }
            let stride: usize = self.dims[axis + 1..].iter().product();
            if stride == 1 {
                plans[axis].process(data);
                continue;
            }
            let outer: usize = self.dims[..axis].iter().product();
            line.resize(n, Complex64::default());
            for o in 0..outer {
                let base = o * n * stride;
                for s in 0..stride {
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + j * stride + s];
                    }
                    plans[axis].process(&mut line);
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride + s] = *v;
                    }
                }
            }
        }
    }
}

pub fn fft_forward(field: &ScalarField) -> Result<Spectrum> {
    if field.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft input"));
    }
    let plan = NdFft::new(&field.dims);
    let mut coefficients: Vec<Complex64> =
        field.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut coefficients);
    Ok(Spectrum {
        dims: field.dims.clone(),
        spacing: field.spacing.clone(),
        wavenumbers: wavenumber_magnitudes(&field.dims, &field.spacing),
        coefficients,
    })
}

/// Inverse transform back to a real field. Rejects spectra whose inverse
/// carries a non-negligible imaginary part (not Hermitian-symmetric).
pub fn fft_inverse(spectrum: &Spectrum) -> Result<ScalarField> {
    if spectrum
        .coefficients
        .iter()
        .any(|c| !(c.re.is_finite() && c.im.is_finite()))
    {
        return Err(Error::NonFinite("spectrum"));
    }
    let plan = NdFft::new(&spectrum.dims);
    let mut values = spectrum.coefficients.clone();
    plan.inverse(&mut values);
    let scale = values.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let worst_imag = values.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if worst_imag > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "spectrum is not Hermitian: imaginary residue {worst_imag:e}"
        )));
    }
    ScalarField::new(
        spectrum.dims.clone(),
        spectrum.spacing.clone(),
        values.into_iter().map(|c| c.re).collect(),
    )
}

/// Deterministic random stream. Cloning forks the state; substreams are
/// independent streams keyed off `seed + index`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, index: u64) -> SeededRng {
        SeededRng::new(self.seed.wrapping_add(index))
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer on `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// `k` distinct indices from `0..n`, sorted.
    pub fn choose_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, k).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Standard-normal draws for `n` samples from `rng`.
pub fn rng_gaussian(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    rng.gaussian_vec(n)
}
