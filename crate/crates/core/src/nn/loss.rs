use crate::error::{Error, Result};

use super::real::Real;

pub const NORM_PENALTY_WEIGHT: f64 = 0.01;
pub const NORM_PENALTY_FRACTION: f64 = 0.1;

/// `-weight * min(||x|| - floor, 0)`: discourages collapsing to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormPenalty {
    pub weight: f64,
    pub floor: f64,
}

impl NormPenalty {
    /// Default constants for an image of `voxels` voxels.
    pub fn for_voxels(voxels: usize) -> Self {
        Self::with_constants(NORM_PENALTY_WEIGHT, NORM_PENALTY_FRACTION, voxels)
    }

    /// `floor = fraction * sqrt(voxels)`.
    pub fn with_constants(weight: f64, fraction: f64, voxels: usize) -> Self {
        Self {
            weight,
            floor: fraction * (voxels as f64).sqrt(),
        }
    }
}

/// `||x - x_true||^2`, plus the norm penalty when given. The gradient at
/// the penalty's kink (and at `x = 0`) takes the zero subgradient.
pub fn loss_and_grad<T: Real>(
    x: &[T],
    x_true: &[T],
    penalty: Option<NormPenalty>,
) -> Result<(f64, Vec<T>)> {
    if x.len() != x_true.len() {
        return Err(Error::shape(format!(
            "loss: output has {} voxels, target {}",
            x.len(),
            x_true.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad: Vec<f64> = x
        .iter()
        .zip(x_true)
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            loss += d * d;
            2.0 * d
        })
        .collect();
    if let Some(p) = penalty {
        let norm = x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm < p.floor {
            loss += p.weight * (p.floor - norm);
            if norm > 0.0 {
                for (g, v) in grad.iter_mut().zip(x) {
                    *g -= p.weight * v.as_f64() / norm;
                }
            }
        }
    }
    Ok((loss, grad.into_iter().map(T::from_f64_lossy).collect()))
}
