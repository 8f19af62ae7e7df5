use crate::error::{Error, Result};
use crate::grids::SeededRng;

use super::real::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named tensors packed into one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let offset = self.len;
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
        };
        self.len += spec.len();
        self.tensors.push(spec);
        offset
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zeros<T: Real>(&self) -> Vec<T> {
        vec![T::zero(); self.len]
    }

    pub fn check<T>(&self, values: &[T], what: &str) -> Result<()> {
        if values.len() != self.len {
            return Err(Error::shape(format!(
                "{what}: {} parameters, layout expects {}",
                values.len(),
                self.len
            )));
        }
        Ok(())
    }
}

/// He-normal draw: every tensor whose name ends in `.weight` gets
/// `N(0, 2 / fan_in)` with `fan_in` = product of all but the leading dim.
/// Everything else is zero.
pub fn he_init(layout: &ParamLayout, rng: &mut SeededRng) -> Vec<f64> {
    let mut values = vec![0.0; layout.len()];
    for t in layout.tensors() {
        if !t.name.ends_with(".weight") {
            continue;
        }
        let fan_in: usize = t.shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        for v in &mut values[t.range()] {
            *v = std * rng.gaussian();
        }
    }
    values
}

pub fn cast<A: Real, B: Real>(values: &[A]) -> Vec<B> {
    values.iter().map(|&v| B::from_f64_lossy(v.as_f64())).collect()
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam; moments kept in `f64` so the update is the same
/// arithmetic whatever the parameter type.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state holds {} entries, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient"));
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].as_f64();
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            let delta = self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            params[i] = T::from_f64_lossy(params[i].as_f64() - delta);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::new();
        assert_eq!(l.push("a.weight", &[2, 3]), 0);
        assert_eq!(l.push("a.bias", &[2]), 6);
        assert_eq!(l.push("scale", &[]), 8);
        assert_eq!(l.len(), 9);
        assert_eq!(l.find("scale").unwrap().len(), 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut adam = Adam::new(1, 0.1);
        let mut p = vec![0.0f64];
        adam.update(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(3, 0.1);
        let mut p = vec![1.0f32, -2.0, 0.5];
        adam.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert!(adam.update(&mut p, &[f32::NAN, 0.0, 0.0]).is_err());
        assert!(adam.update(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = Adam::new(2, 0.01);
            let mut p = vec![0.3f32, -0.1];
            for k in 0..5 {
                let g = [p[0] * k as f32, p[1] - 1.0];
                adam.update(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn he_init_variance() {
        let mut l = ParamLayout::new();
        l.push("c.weight", &[32, 16, 5, 5]);
        l.push("c.bias", &[32]);
        let v = he_init(&l, &mut SeededRng::new(4));
        let w = &v[..32 * 400];
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        let want = 2.0 / 400.0;
        assert!((var - want).abs() <= 0.2 * want);
        assert!(v[32 * 400..].iter().all(|&b| b == 0.0));
        assert_eq!(v, he_init(&l, &mut SeededRng::new(4)));
    }
}
