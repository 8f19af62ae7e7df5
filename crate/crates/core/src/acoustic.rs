//! Forward operator `A` (initial pressure -> sensor time series), its exact
//! adjoint, and the data-fit gradient `A*(Ax - y)`.
//!
//! Propagation uses the closed-form solution of the homogeneous wave
//! equation with zero initial velocity: `p^(k, t) = x^(k) cos(c0 |k| t)`.
//! The image is embedded at the origin of a larger periodic computational
//! grid so wrap-around arrivals fall outside the recorded time window.
//! Sensors sit on the `axis 0 == 0` face; sampling is pointwise.
//!
//! Both directions generate `cos(c0 |k| t_i)` with the same Chebyshev
//! recurrence, so the pair is adjoint up to FFT roundoff.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grids::{dot, flat_index, norm, unravel, wavenumber_magnitudes, NdFft, ScalarField, SeededRng};

/// Scanner values of the reference setup, used for the desk defaults.
pub const SOUND_SPEED: f64 = 1580.0;
pub const VOXEL_SIZE: f64 = 84.75e-6;

/// Random subset of the full sensor list; indices are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingMask {
    full: usize,
    active: Vec<usize>,
}

impl SamplingMask {
    pub fn full(count: usize) -> Self {
        Self {
            full: count,
            active: (0..count).collect(),
        }
    }

    pub fn new(full: usize, mut active: Vec<usize>) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if active.iter().any(|&i| i >= full) {
            return Err(Error::invalid(format!(
                "mask index out of range for {full} sensors"
            )));
        }
        Ok(Self { full, active })
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn full_count(&self) -> usize {
        self.full
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticGeometry {
    dims: Vec<usize>,
    dx: f64,
    sound_speed: f64,
    n_t: usize,
    dt: f64,
    sensor_pitch: usize,
    padded_dims: Vec<usize>,
    sensors: Vec<Vec<usize>>,
    mask: SamplingMask,
}

/// `dt` such that `c0 * n_t * dt` is 1.5 grid diagonals.
pub fn default_dt(dims: &[usize], dx: f64, sound_speed: f64, n_t: usize) -> f64 {
    let diagonal = dims.iter().map(|&d| (d as f64 * dx).powi(2)).sum::<f64>().sqrt();
    1.5 * diagonal / (sound_speed * n_t as f64)
}

impl AcousticGeometry {
    /// Full sensor set on the `axis 0 == 0` face every `sensor_pitch` voxels.
    /// `pad` multiplies each axis to give the periodic computational grid.
    pub fn new(
        dims: &[usize],
        dx: f64,
        sound_speed: f64,
        n_t: usize,
        dt: f64,
        sensor_pitch: usize,
        pad: &[usize],
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("acoustic grids need at least two axes"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("grid extents must be positive: {dims:?}")));
        }
        if !(dx > 0.0 && sound_speed > 0.0 && dt > 0.0) {
            return Err(Error::invalid("dx, sound speed and dt must be positive"));
        }
        if n_t == 0 {
            return Err(Error::invalid("need at least one time sample"));
        }
        if sensor_pitch == 0 {
            return Err(Error::invalid("sensor pitch must be positive"));
        }
        if pad.len() != dims.len() || pad.iter().any(|&p| p == 0) {
            return Err(Error::invalid(format!(
                "padding factors {pad:?} do not fit {}-d grid",
                dims.len()
            )));
        }
        let face_dims = &dims[1..];
        let face_total: usize = face_dims.iter().product();
        let sensors: Vec<Vec<usize>> = (0..face_total)
            .map(|f| unravel(face_dims, f))
            .filter(|c| c.iter().all(|&v| v % sensor_pitch == 0))
            .collect();
        let mask = SamplingMask::full(sensors.len());
        Ok(Self {
            dims: dims.to_vec(),
            dx,
            sound_speed,
            n_t,
            dt,
            sensor_pitch,
            padded_dims: dims.iter().zip(pad).map(|(d, p)| d * p).collect(),
            sensors,
            mask,
        })
    }

    /// 64x64, reference voxel size and sound speed, 32 sensors at pitch 2,
    /// 128 time samples.
    pub fn desk() -> Self {
        let dims = [64, 64];
        let n_t = 128;
        let dt = default_dt(&dims, VOXEL_SIZE, SOUND_SPEED, n_t);
        Self::new(&dims, VOXEL_SIZE, SOUND_SPEED, n_t, dt, 2, &default_padding(2))
            .expect("desk geometry is valid")
    }

    pub fn with_mask(mut self, mask: SamplingMask) -> Result<Self> {
        if mask.full_count() != self.sensors.len() {
            return Err(Error::invalid(format!(
                "mask built for {} sensors, geometry has {}",
                mask.full_count(),
                self.sensors.len()
            )));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn with_sound_speed(mut self, sound_speed: f64) -> Result<Self> {
        if !(sound_speed > 0.0) {
            return Err(Error::invalid("sound speed must be positive"));
        }
        self.sound_speed = sound_speed;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> Vec<f64> {
        vec![self.dx; self.dims.len()]
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sensor_pitch(&self) -> usize {
        self.sensor_pitch
    }

    pub fn padded_dims(&self) -> &[usize] {
        &self.padded_dims
    }

    /// Face coordinates (axes 1..) of every sensor in the full set.
    pub fn sensors(&self) -> &[Vec<usize>] {
        &self.sensors
    }

    pub fn mask(&self) -> &SamplingMask {
        &self.mask
    }

    pub fn active_sensor_count(&self) -> usize {
        self.mask.len()
    }

    /// Grid index of a sensor from the full list.
    pub fn sensor_grid_index(&self, sensor: usize) -> Vec<usize> {
        let mut idx = vec![0];
        idx.extend_from_slice(&self.sensors[sensor]);
        idx
    }

    pub fn zero_field(&self) -> ScalarField {
        ScalarField::zeros(&self.dims, &self.spacing())
    }

    pub fn zero_data(&self) -> SensorData {
        SensorData::zeros(self.active_sensor_count(), self.n_t, self.dt)
    }

    /// Stable textual description, used for cache keys and manifests.
    pub fn describe(&self) -> String {
        format!(
            "dims={:?} dx={:e} c0={:e} n_t={} dt={:e} pitch={} padded={:?} mask={:?}",
            self.dims,
            self.dx,
            self.sound_speed,
            self.n_t,
            self.dt,
            self.sensor_pitch,
            self.padded_dims,
            self.mask.active()
        )
    }
}

/// Normal axis x4, lateral axes x2.
pub fn default_padding(ndim: usize) -> Vec<usize> {
    let mut pad = vec![2; ndim];
    pad[0] = 4;
    pad
}

/// Sampled pressure: `n_sensors x n_t`, sensor-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorData {
    n_sensors: usize,
    n_t: usize,
    dt: f64,
    data: Vec<f64>,
}

impl SensorData {
    pub fn zeros(n_sensors: usize, n_t: usize, dt: f64) -> Self {
        Self {
            n_sensors,
            n_t,
            dt,
            data: vec![0.0; n_sensors * n_t],
        }
    }

    pub fn new(n_sensors: usize, n_t: usize, dt: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_sensors * n_t {
            return Err(Error::shape(format!(
                "sensor data length {} != {n_sensors} x {n_t}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sensor data"));
        }
        Ok(Self {
            n_sensors,
            n_t,
            dt,
            data,
        })
    }

    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "sensor data length mismatch");
        Self {
            n_sensors: self.n_sensors,
            n_t: self.n_t,
            dt: self.dt,
            data,
        }
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn trace(&self, sensor: usize) -> &[f64] {
        &self.data[sensor * self.n_t..(sensor + 1) * self.n_t]
    }

    pub fn get(&self, sensor: usize, t: usize) -> f64 {
        self.data[sensor * self.n_t + t]
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn dot(&self, other: &SensorData) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn sub(&self, other: &SensorData) -> SensorData {
        self.with_data(self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> SensorData {
        self.with_data(self.data.iter().map(|v| v * s).collect())
    }

    /// Population standard deviation over all samples.
    pub fn std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        (self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    fn check_shape(&self, geometry: &AcousticGeometry) -> Result<()> {
        if self.n_sensors != geometry.active_sensor_count() || self.n_t != geometry.n_t() {
            return Err(Error::shape(format!(
                "sensor data {}x{} vs geometry {}x{}",
                self.n_sensors,
                self.n_t,
                geometry.active_sensor_count(),
                geometry.n_t()
            )));
        }
        Ok(())
    }
}

/// Matrix-free linear map on flat real vectors.
pub trait LinearOperator {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>>;
}

/// Pressure field at time `t` on the periodic grid of `x`.
pub fn propagate(x: &ScalarField, sound_speed: f64, t: f64) -> Result<ScalarField> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("propagation time must be >= 0, got {t}")));
    }
    let plan = NdFft::new(x.dims());
    let k = wavenumber_magnitudes(x.dims(), x.spacing());
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    plan.forward(&mut buf);
    for (c, &kk) in buf.iter_mut().zip(&k) {
        *c *= (sound_speed * kk * t).cos();
    }
    plan.inverse(&mut buf);
    ScalarField::new(
        x.dims().to_vec(),
        x.spacing().to_vec(),
        buf.into_iter().map(|c| c.re).collect(),
    )
}

/// The measurement operator for one geometry. Counts every forward or
/// adjoint application.
#[derive(Debug)]
pub struct AcousticOperator {
    geometry: AcousticGeometry,
    grid_fft: NdFft,
    face_fft: NdFft,
    /// `2 cos(c0 |k| dt)` per padded bin.
    two_cos: Vec<f64>,
    /// Flat face offset (in the padded face) of each active sensor.
    active_face_offsets: Vec<usize>,
    applications: AtomicUsize,
}

impl AcousticOperator {
    pub fn new(geometry: AcousticGeometry) -> Self {
        let padded = geometry.padded_dims().to_vec();
        let spacing = vec![geometry.dx(); padded.len()];
        let step = geometry.sound_speed() * geometry.dt();
        let two_cos = wavenumber_magnitudes(&padded, &spacing)
            .into_iter()
            .map(|k| 2.0 * (step * k).cos())
            .collect();
        let face = &padded[1..];
        let active_face_offsets = geometry
            .mask()
            .active()
            .iter()
            .map(|&s| flat_index(face, &geometry.sensors()[s]))
            .collect();
        Self {
            grid_fft: NdFft::new(&padded),
            face_fft: NdFft::new(face),
            two_cos,
            active_face_offsets,
            geometry,
            applications: AtomicUsize::new(0),
        }
    }

    pub fn geometry(&self) -> &AcousticGeometry {
        &self.geometry
    }

    /// Forward plus adjoint applications since construction or last reset.
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }

    fn face_len(&self) -> usize {
        self.face_fft.len()
    }

    pub fn forward(&self, x: &ScalarField) -> Result<SensorData> {
        if x.dims() != self.geometry.dims() {
            return Err(Error::shape(format!(
                "field dims {:?} vs geometry {:?}",
                x.dims(),
                self.geometry.dims()
            )));
        }
        if self.geometry.mask().is_empty() {
            return Err(Error::invalid("sampling mask selects no sensors"));
        }
        self.applications.fetch_add(1, Ordering::Relaxed);

        let padded = self.geometry.padded_dims();
        let dims = self.geometry.dims();
        let mut spectrum = vec![Complex64::default(); self.grid_fft.len()];
        for (flat, &v) in x.data().iter().enumerate() {
            let idx = unravel(dims, flat);
            spectrum[flat_index(padded, &idx)] = Complex64::new(v, 0.0);
        }
        self.grid_fft.forward(&mut spectrum);

        let n_t = self.geometry.n_t();
        let face_len = self.face_len();
        let normal = padded[0];
        let inv_normal = 1.0 / normal as f64;
        let mut cur = vec![1.0; spectrum.len()];
        let mut prev: Vec<f64> = self.two_cos.iter().map(|c| 0.5 * c).collect();
        let mut face = vec![Complex64::default(); face_len];
        let mut out = SensorData::zeros(self.active_face_offsets.len(), n_t, self.geometry.dt());
        for t in 0..n_t {
            face.iter_mut().for_each(|c| *c = Complex64::default());
            for k0 in 0..normal {
                let row = k0 * face_len..(k0 + 1) * face_len;
                let spec = &spectrum[row.clone()];
                let cur_row = &mut cur[row.clone()];
                let prev_row = &mut prev[row.clone()];
                let two_cos_row = &self.two_cos[row];
                for j in 0..face_len {
                    let c = cur_row[j];
                    face[j] += spec[j] * c;
                    let next = two_cos_row[j] * c - prev_row[j];
                    prev_row[j] = c;
                    cur_row[j] = next;
                }
            }
            self.face_fft.inverse(&mut face);
            for (s, &off) in self.active_face_offsets.iter().enumerate() {
                out.data[s * n_t + t] = face[off].re * inv_normal;
            }
        }
        Ok(out)
    }

    pub fn adjoint(&self, y: &SensorData) -> Result<ScalarField> {
        y.check_shape(&self.geometry)?;
        self.applications.fetch_add(1, Ordering::Relaxed);

        let padded = self.geometry.padded_dims().to_vec();
        let n_t = self.geometry.n_t();
        let face_len = self.face_len();
        let normal = padded[0];
        let mut acc = vec![Complex64::default(); self.grid_fft.len()];
        let mut cur = vec![1.0; acc.len()];
        let mut prev: Vec<f64> = self.two_cos.iter().map(|c| 0.5 * c).collect();
        let mut face = vec![Complex64::default(); face_len];
        for t in 0..n_t {
            face.iter_mut().for_each(|c| *c = Complex64::default());
            for (s, &off) in self.active_face_offsets.iter().enumerate() {
                face[off] = Complex64::new(y.data[s * n_t + t], 0.0);
            }
            self.face_fft.forward(&mut face);
            for k0 in 0..normal {
                let row = k0 * face_len..(k0 + 1) * face_len;
                let acc_row = &mut acc[row.clone()];
                let cur_row = &mut cur[row.clone()];
                let prev_row = &mut prev[row.clone()];
                let two_cos_row = &self.two_cos[row];
                for j in 0..face_len {
                    let c = cur_row[j];
                    acc_row[j] += face[j] * c;
                    let next = two_cos_row[j] * c - prev_row[j];
                    prev_row[j] = c;
                    cur_row[j] = next;
                }
            }
        }
        self.grid_fft.inverse(&mut acc);

        let dims = self.geometry.dims().to_vec();
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|flat| acc[flat_index(&padded, &unravel(&dims, flat))].re)
            .collect();
        ScalarField::new(dims, self.geometry.spacing(), data)
    }

    /// `A*(Ax - y)`.
    pub fn data_fit_gradient(&self, x: &ScalarField, y: &SensorData) -> Result<ScalarField> {
        y.check_shape(&self.geometry)?;
        let residual = self.forward(x)?.sub(y);
        self.adjoint(&residual)
    }

    /// `1/2 ||Ax - y||^2`.
    pub fn data_fit(&self, x: &ScalarField, y: &SensorData) -> Result<f64> {
        let r = self.forward(x)?.sub(y);
        Ok(0.5 * r.norm().powi(2))
    }
}

impl LinearOperator for AcousticOperator {
    fn input_len(&self) -> usize {
        self.geometry.dims().iter().product()
    }

    fn output_len(&self) -> usize {
        self.geometry.active_sensor_count() * self.geometry.n_t()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let field = ScalarField::new(
            self.geometry.dims().to_vec(),
            self.geometry.spacing(),
            x.to_vec(),
        )?;
        Ok(self.forward(&field)?.data)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        let data = SensorData::new(
            self.geometry.active_sensor_count(),
            self.geometry.n_t(),
            self.geometry.dt(),
            y.to_vec(),
        )?;
        Ok(self.adjoint(&data)?.into_data())
    }
}

/// Explicit row-major matrix; assembled from any operator for testing.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl DenseOperator {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::shape("dense matrix entry count"));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, entries }
    }

    /// Column-by-column assembly through `op.apply`.
    pub fn assemble(op: &dyn LinearOperator) -> Result<Self> {
        let (rows, cols) = (op.output_len(), op.input_len());
        let mut entries = vec![0.0; rows * cols];
        let mut e = vec![0.0; cols];
        for j in 0..cols {
            e[j] = 1.0;
            let col = op.apply(&e)?;
            e[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                entries[i * cols + j] = v;
            }
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn transpose_times(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let yi = y[i];
            for (o, a) in out.iter_mut().zip(&self.entries[i * self.cols..(i + 1) * self.cols]) {
                *o += a * yi;
            }
        }
        out
    }
}

impl LinearOperator for DenseOperator {
    fn input_len(&self) -> usize {
        self.cols
    }

    fn output_len(&self) -> usize {
        self.rows
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("dense apply"));
        }
        Ok(self.entries.chunks(self.cols).map(|row| dot(row, x)).collect())
    }

    fn apply_adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape("dense adjoint"));
        }
        Ok(self.transpose_times(y))
    }
}

/// Uniformly random `floor(full / factor)` sensors, deterministic per seed.
pub fn make_subsampling_mask(
    geometry: &AcousticGeometry,
    factor: usize,
    rng: &mut SeededRng,
) -> Result<SamplingMask> {
    let full = geometry.sensors().len();
    if factor == 0 {
        return Err(Error::invalid("sub-sampling factor must be positive"));
    }
    if factor > full {
        return Err(Error::invalid(format!(
            "sub-sampling factor {factor} exceeds the {full} available sensors"
        )));
    }
    if factor == 1 {
        return Ok(SamplingMask::full(full));
    }
    SamplingMask::new(full, rng.choose_sorted(full, full / factor))
}

#[derive(Debug, Clone)]
pub struct LipschitzEstimate {
    /// Largest-eigenvalue estimate of `A*A`.
    pub value: f64,
    /// Best Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

/// Independent random starts per estimate. The top of the `A*A` spectrum
/// is often clustered; one unlucky start can stall on the second mode.
pub const POWER_STARTS: usize = 4;

/// Power iteration on `A*A` from [`POWER_STARTS`] Gaussian starts; each
/// history entry is the largest Rayleigh quotient seen at that iteration.
pub fn estimate_lipschitz(
    op: &dyn LinearOperator,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<LipschitzEstimate> {
    if iters == 0 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    let mut starts: Vec<Vec<f64>> = (0..POWER_STARTS)
        .map(|_| {
            let mut v = rng.gaussian_vec(op.input_len());
            let n0 = norm(&v);
            v.iter_mut().for_each(|x| *x /= n0);
            v
        })
        .collect();
    let mut history = Vec::with_capacity(iters);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..iters {
        for v in starts.iter_mut() {
            let w = op.apply_adjoint(&op.apply(v)?)?;
            best = best.max(dot(v, &w));
            let nw = norm(&w);
            if nw > 0.0 {
                *v = w.into_iter().map(|x| x / nw).collect();
            }
        }
        history.push(best);
    }
    Ok(LipschitzEstimate { value: best, history })
}
