//! Synthetic ground truth: tube and branching-vessel phantoms, an
//! out-of-distribution tumor phantom, low-intensity background
//! augmentation, measurement noise, and dataset assembly.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::acoustic::{AcousticOperator, SensorData};
use crate::error::{Error, Result};
use crate::grids::{unravel, NdFft, ScalarField, SeededRng};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    Tubes,
    Vessels,
    Tumor,
}

impl PhantomKind {
    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Tubes => "tubes",
            PhantomKind::Vessels => "vessels",
            PhantomKind::Tumor => "tumor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tubes" => Some(PhantomKind::Tubes),
            "vessels" => Some(PhantomKind::Vessels),
            "tumor" => Some(PhantomKind::Tumor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// Tubes per image, or trees per image for vessels (inclusive).
    pub count: (usize, usize),
    /// Tube radius, or root radius for vessel trees (voxels).
    pub radius: (f64, f64),
    /// Bifurcation generations per vessel tree.
    pub depth: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn tubes(seed: u64) -> Self {
        Self {
            kind: PhantomKind::Tubes,
            count: (3, 8),
            radius: (0.75, 1.1),
            depth: 0,
            seed,
        }
    }

    pub fn vessels(seed: u64) -> Self {
        Self {
            kind: PhantomKind::Vessels,
            count: (1, 3),
            radius: (0.9, 1.4),
            depth: 3,
            seed,
        }
    }

    pub fn tumor(seed: u64) -> Self {
        Self {
            kind: PhantomKind::Tumor,
            count: (1, 1),
            radius: (1.0, 1.4),
            depth: 0,
            seed,
        }
    }

    pub fn for_kind(kind: PhantomKind, seed: u64) -> Self {
        match kind {
            PhantomKind::Tubes => Self::tubes(seed),
            PhantomKind::Vessels => Self::vessels(seed),
            PhantomKind::Tumor => Self::tumor(seed),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = self.count;
        let (r0, r1) = self.radius;
        if c0 == 0 || c0 > c1 {
            return Err(Error::invalid(format!("count range {c0}..{c1}")));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::invalid(format!("radius range {r0}..{r1}")));
        }
        Ok(())
    }

    pub fn generate(&self, dims: &[usize], spacing: &[f64]) -> Result<ScalarField> {
        match self.kind {
            PhantomKind::Tubes => tube_phantom(self, dims, spacing),
            PhantomKind::Vessels => vessel_phantom(self, dims, spacing),
            PhantomKind::Tumor => tumor_phantom(self, dims, spacing),
        }
    }
}

/// A capsule: all voxels within `radius` of segment `a..b`.
struct Capsule {
    a: Vec<f64>,
    b: Vec<f64>,
    radius: f64,
    intensity: f64,
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = vdot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = vdot(&ab, &ab);
    let t = if len2 > 0.0 {
        (vdot(&ap, &ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest: Vec<f64> = a.iter().zip(&ab).map(|(x, d)| x + t * d).collect();
    let d = sub(p, &closest);
    vdot(&d, &d).sqrt()
}

fn rasterize(dims: &[usize], capsules: &[Capsule]) -> Vec<f64> {
    let total: usize = dims.iter().product();
    let mut out = vec![0.0f64; total];
    let strides: Vec<usize> = (0..dims.len())
        .map(|i| dims[i + 1..].iter().product())
        .collect();
    for c in capsules {
        let lo: Vec<usize> = (0..dims.len())
            .map(|i| (c.a[i].min(c.b[i]) - c.radius).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..dims.len())
            .map(|i| {
                ((c.a[i].max(c.b[i]) + c.radius).ceil().max(0.0) as usize).min(dims[i] - 1)
            })
            .collect();
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            continue;
        }
        let box_dims: Vec<usize> = lo.iter().zip(&hi).map(|(l, h)| h - l + 1).collect();
        let box_total: usize = box_dims.iter().product();
        let mut p = vec![0.0; dims.len()];
        for flat in 0..box_total {
            let idx = unravel(&box_dims, flat);
            let mut off = 0;
            for i in 0..dims.len() {
                let coord = lo[i] + idx[i];
                p[i] = coord as f64;
                off += coord * strides[i];
            }
            if segment_distance(&p, &c.a, &c.b) <= c.radius {
                out[off] = out[off].max(c.intensity);
            }
        }
    }
    out
}

fn finish(dims: &[usize], spacing: &[f64], mut data: Vec<f64>) -> Result<ScalarField> {
    let max = data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        data.iter_mut().for_each(|v| *v /= max);
    }
    ScalarField::new(dims.to_vec(), spacing.to_vec(), data)
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&d| d < 32) {
        return Err(Error::invalid(format!("phantoms need >= 32 voxels per axis, got {dims:?}")));
    }
    Ok(())
}

fn random_unit(rng: &mut SeededRng, ndim: usize) -> Vec<f64> {
    loop {
        let mut v = rng.gaussian_vec(ndim);
        if vdot(&v, &v) > 1e-12 {
            normalize(&mut v);
            return v;
        }
    }
}

/// Random unit vector orthogonal to `dir`.
fn random_perpendicular(rng: &mut SeededRng, dir: &[f64]) -> Vec<f64> {
    loop {
        let mut v = rng.gaussian_vec(dir.len());
        let proj = vdot(&v, dir);
        v.iter_mut().zip(dir).for_each(|(x, d)| *x -= proj * d);
        if vdot(&v, &v) > 1e-12 {
            normalize(&mut v);
            return v;
        }
    }
}

fn random_boundary_point(rng: &mut SeededRng, dims: &[usize]) -> Vec<f64> {
    let axis = rng.int_inclusive(0, dims.len() - 1);
    let high = rng.uniform(0.0, 1.0) < 0.5;
    dims.iter()
        .enumerate()
        .map(|(i, &d)| {
            let top = (d - 1) as f64;
            if i == axis {
                if high {
                    top
                } else {
                    0.0
                }
            } else {
                rng.uniform(0.0, top)
            }
        })
        .collect()
}

/// Smooth curved strips: quadratic Bezier curves between two boundary
/// points, each with its own constant intensity in `[0.5, 1]`.
pub fn tube_phantom(spec: &PhantomSpec, dims: &[usize], spacing: &[f64]) -> Result<ScalarField> {
    spec.validate()?;
    check_dims(dims)?;
    let mut rng = SeededRng::new(spec.seed);
    let count = rng.int_inclusive(spec.count.0, spec.count.1);
    let mut capsules = Vec::new();
    for tube in 0..count {
        let start = random_boundary_point(&mut rng, dims);
        let mut end = random_boundary_point(&mut rng, dims);
        while vdot(&sub(&end, &start), &sub(&end, &start)).sqrt() < 0.5 * dims[0] as f64 {
            end = random_boundary_point(&mut rng, dims);
        }
        let control: Vec<f64> = dims
            .iter()
            .map(|&d| rng.uniform(0.2, 0.8) * (d - 1) as f64)
            .collect();
        let radius = rng.uniform(spec.radius.0, spec.radius.1);
        // distinct levels spread over [0.5, 1]
        let intensity = 0.5 + 0.5 * (tube as f64 + rng.uniform(0.0, 1.0)) / count as f64;
        let steps = 24;
        let point = |t: f64| -> Vec<f64> {
            (0..dims.len())
                .map(|i| {
                    (1.0 - t) * (1.0 - t) * start[i] + 2.0 * (1.0 - t) * t * control[i] + t * t * end[i]
                })
                .collect()
        };
        for s in 0..steps {
            capsules.push(Capsule {
                a: point(s as f64 / steps as f64),
                b: point((s + 1) as f64 / steps as f64),
                radius,
                intensity,
            });
        }
    }
    finish(dims, spacing, rasterize(dims, &capsules))
}

struct Branch {
    start: Vec<f64>,
    dir: Vec<f64>,
    radius: f64,
    length: f64,
    generation: usize,
}

fn inside(p: &[f64], dims: &[usize]) -> bool {
    p.iter().zip(dims).all(|(&x, &d)| x >= 0.0 && x <= (d - 1) as f64)
}

fn grow_tree(
    rng: &mut SeededRng,
    dims: &[usize],
    root: Branch,
    depth: usize,
    intensity: f64,
    out: &mut Vec<Capsule>,
) {
    let step = 1.5;
    let mut stack = vec![root];
    while let Some(branch) = stack.pop() {
        let mut p = branch.start.clone();
        let mut dir = branch.dir.clone();
        let mut travelled = 0.0;
        let mut left_domain = false;
        while travelled < branch.length {
            // small random turn keeps the centreline smooth
            let turn = random_perpendicular(rng, &dir);
            let bend = 0.12 * rng.gaussian();
            dir.iter_mut().zip(&turn).for_each(|(d, t)| *d += bend * t);
            normalize(&mut dir);
            let next: Vec<f64> = p.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            if !inside(&next, dims) {
                left_domain = true;
                break;
            }
            out.push(Capsule {
                a: p.clone(),
                b: next.clone(),
                radius: branch.radius,
                intensity,
            });
            p = next;
            travelled += step;
        }
        if left_domain || branch.generation >= depth {
            continue;
        }
        let base = rng.uniform(20.0, 45.0).to_radians();
        let perp = random_perpendicular(rng, &dir);
        for sign in [1.0, -1.0] {
            let angle = sign * (base + rng.uniform(-5.0, 5.0).to_radians());
            let mut child: Vec<f64> = dir
                .iter()
                .zip(&perp)
                .map(|(d, q)| angle.cos() * d + angle.sin() * q)
                .collect();
            normalize(&mut child);
            stack.push(Branch {
                start: p.clone(),
                dir: child,
                radius: (branch.radius * 0.75).max(0.75),
                length: branch.length * rng.uniform(0.7, 0.9),
                generation: branch.generation + 1,
            });
        }
    }
}

/// Branching vessel trees grown from the boundary inward with binary
/// bifurcations, tapering radii and smooth centrelines.
pub fn vessel_phantom(spec: &PhantomSpec, dims: &[usize], spacing: &[f64]) -> Result<ScalarField> {
    spec.validate()?;
    check_dims(dims)?;
    let mut rng = SeededRng::new(spec.seed);
    let trees = rng.int_inclusive(spec.count.0, spec.count.1);
    let extent = *dims.iter().min().unwrap() as f64;
    let mut capsules = Vec::new();
    for _ in 0..trees {
        let start = random_boundary_point(&mut rng, dims);
        // aim roughly at the interior
        let target: Vec<f64> = dims
            .iter()
            .map(|&d| rng.uniform(0.3, 0.7) * (d - 1) as f64)
            .collect();
        let mut dir = sub(&target, &start);
        normalize(&mut dir);
        if vdot(&dir, &dir) == 0.0 {
            dir = random_unit(&mut rng, dims.len());
        }
        let intensity = rng.uniform(0.5, 1.0);
        let root = Branch {
            start,
            dir,
            radius: rng.uniform(spec.radius.0, spec.radius.1),
            length: rng.uniform(0.25, 0.4) * extent,
            generation: 0,
        };
        grow_tree(&mut rng, dims, root, spec.depth, intensity, &mut capsules);
    }
    finish(dims, spacing, rasterize(dims, &capsules))
}

/// Filled ellipse at 0.6 surrounded by a wobbly vessel ring at 1.0, in the
/// plane of the first two axes.
pub fn tumor_phantom(spec: &PhantomSpec, dims: &[usize], spacing: &[f64]) -> Result<ScalarField> {
    spec.validate()?;
    check_dims(dims)?;
    let mut rng = SeededRng::new(spec.seed);
    let centre: Vec<f64> = dims
        .iter()
        .map(|&d| rng.uniform(0.4, 0.6) * (d - 1) as f64)
        .collect();
    let semi: Vec<f64> = dims.iter().map(|&d| rng.uniform(0.12, 0.2) * d as f64).collect();
    let total: usize = dims.iter().product();
    let mut data = vec![0.0f64; total];
    for (flat, v) in data.iter_mut().enumerate() {
        let idx = unravel(dims, flat);
        let r2: f64 = idx
            .iter()
            .zip(&centre)
            .zip(&semi)
            .map(|((&i, c), s)| ((i as f64 - c) / s).powi(2))
            .sum();
        if r2 <= 1.0 {
            *v = 0.6;
        }
    }
    let ring_scale = rng.uniform(1.3, 1.5);
    let radius = rng.uniform(spec.radius.0, spec.radius.1);
    let phase = rng.uniform(0.0, 2.0 * PI);
    let wobble = rng.uniform(0.05, 0.12);
    let n = 72;
    let ring_point = |j: usize| -> Vec<f64> {
        let theta = 2.0 * PI * j as f64 / n as f64;
        let r = ring_scale * (1.0 + wobble * (3.0 * theta + phase).sin());
        let mut p = centre.clone();
        p[0] += r * semi[0] * theta.cos();
        p[1] += r * semi[1] * theta.sin();
        p
    };
    let capsules: Vec<Capsule> = (0..n)
        .map(|j| Capsule {
            a: ring_point(j),
            b: ring_point(j + 1),
            radius,
            intensity: 1.0,
        })
        .collect();
    let ring = rasterize(dims, &capsules);
    data.iter_mut().zip(ring).for_each(|(v, r)| *v = v.max(r));
    finish(dims, spacing, data)
}

/// White noise smoothed by a Gaussian of `sigma` voxels (periodic), with
/// negatives clipped and the maximum scaled to 0.1.
pub fn background_component(dims: &[usize], sigma: f64, rng: &mut SeededRng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("background correlation length must be >= 0"));
    }
    let total: usize = dims.iter().product();
    let plan = NdFft::new(dims);
    let mut buf: Vec<Complex64> = rng
        .gaussian_vec(total)
        .into_iter()
        .map(|v| Complex64::new(v, 0.0))
        .collect();
    plan.forward(&mut buf);
    let k = crate::grids::wavenumber_magnitudes(dims, &vec![1.0; dims.len()]);
    for (c, kk) in buf.iter_mut().zip(k) {
        *c *= (-0.5 * sigma * sigma * kk * kk).exp();
    }
    plan.inverse(&mut buf);
    let mut field: Vec<f64> = buf.into_iter().map(|c| c.re.max(0.0)).collect();
    let max = field.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        field.iter_mut().for_each(|v| *v *= 0.1 / max);
    }
    Ok(field)
}

/// `x_true` plus background wherever `x_true <= 0.1`.
pub fn background_field(x_true: &ScalarField, sigma: f64, rng: &mut SeededRng) -> Result<ScalarField> {
    if x_true.min() < 0.0 || x_true.max() > 1.0 + 1e-12 {
        return Err(Error::invalid("background augmentation expects intensities in [0, 1]"));
    }
    let b = background_component(x_true.dims(), sigma, rng)?;
    Ok(x_true.with_data(
        x_true
            .data()
            .iter()
            .zip(b)
            .map(|(&x, b)| if x <= 0.1 { x + b } else { x })
            .collect(),
    ))
}

/// `y + e` with Gaussian `e` scaled so that `||y|| / ||e|| == snr`.
pub fn add_noise_snr(y: &SensorData, snr: f64, rng: &mut SeededRng) -> Result<SensorData> {
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    let signal = y.norm();
    if signal == 0.0 {
        return Err(Error::Degenerate("cannot set an SNR on an all-zero signal".into()));
    }
    let noise = rng.gaussian_vec(y.data().len());
    let scale = signal / (snr * crate::grids::norm(&noise));
    Ok(y.with_data(
        y.data()
            .iter()
            .zip(noise)
            .map(|(s, e)| s + scale * e)
            .collect(),
    ))
}

pub fn rescale_to_reference_std(y: &SensorData, ref_std: f64) -> Result<SensorData> {
    if !(ref_std > 0.0) {
        return Err(Error::invalid("reference standard deviation must be positive"));
    }
    let std = y.std();
    if std == 0.0 {
        return Err(Error::Degenerate("constant measurement has no spread to rescale".into()));
    }
    Ok(y.scale(ref_std / std))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub x_true: ScalarField,
    pub y: SensorData,
    pub x0: ScalarField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub snr: f64,
    /// Correlation length (voxels) of the background field; `None` for
    /// clean phantoms.
    pub background_sigma: Option<f64>,
    pub seed: u64,
}

/// `n` samples; sample `i` is a pure function of `(spec, geometry, seed + i)`.
/// In background mode the measurement sees `x_back` but the stored target
/// stays the clean phantom.
pub fn build_dataset(
    n: usize,
    spec: &PhantomSpec,
    op: &AcousticOperator,
    options: &DatasetOptions,
) -> Result<Vec<DatasetSample>> {
    if n == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    spec.validate()?;
    par::map_range(n, |i| build_sample(i, spec, op, options))
        .into_iter()
        .collect()
}

fn build_sample(
    index: usize,
    spec: &PhantomSpec,
    op: &AcousticOperator,
    options: &DatasetOptions,
) -> Result<DatasetSample> {
    let geometry = op.geometry();
    let mut rng = SeededRng::new(options.seed.wrapping_add(index as u64));
    let phantom_seed = (rng.uniform(0.0, 1.0) * u32::MAX as f64) as u64;
    let x_true = spec
        .with_seed(phantom_seed)
        .generate(geometry.dims(), &geometry.spacing())?;
    let x_measured = match options.background_sigma {
        Some(sigma) => background_field(&x_true, sigma, &mut rng)?,
        None => x_true.clone(),
    };
    let clean = op.forward(&x_measured)?;
    let y = add_noise_snr(&clean, options.snr, &mut rng)?;
    let x0 = op.adjoint(&y)?;
    Ok(DatasetSample { x_true, y, x0 })
}
