use crate::error::Result;
use crate::grids::SeededRng;
use crate::par;

use super::params::Adam;
use super::real::Real;

/// Mini-batches of sample indices for `steps` optimizer steps; the order is
/// reshuffled at the start of every pass over the data.
pub fn batch_schedule(n: usize, batch: usize, steps: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut schedule = Vec::with_capacity(steps);
    let mut cursor = 0;
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch.min(n) {
            if cursor == order.len() {
                order = (0..n).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            b.push(order[cursor]);
            cursor += 1;
        }
        schedule.push(b);
    }
    schedule
}

/// One Adam step on the mean loss over `batch`. `sample` returns the loss
/// and parameter gradient of one sample; samples may run in parallel but
/// are summed in batch order so results do not depend on scheduling.
pub fn minibatch_step<T, F>(params: &mut [T], adam: &mut Adam, batch: &[usize], sample: F) -> Result<f64>
where
    T: Real,
    F: Fn(&[T], usize) -> Result<(f64, Vec<T>)> + Sync + Send,
{
    let snapshot: &[T] = params;
    let per_sample = par::map_slice(batch, |_, &i| sample(snapshot, i));
    let mut total = vec![T::zero(); params.len()];
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (a, b) in total.iter_mut().zip(&g) {
            *a = *a + *b;
        }
    }
    let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
    total.iter_mut().for_each(|v| *v = *v * inv);
    adam.update(params, &total)?;
    Ok(loss / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_every_sample_each_pass() {
        let s = batch_schedule(5, 2, 5, &mut SeededRng::new(1));
        let flat: Vec<usize> = s.iter().flatten().copied().collect();
        let mut first: Vec<usize> = flat[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert!(s.iter().all(|b| b.len() == 2));
        assert_eq!(batch_schedule(1, 2, 3, &mut SeededRng::new(1)), vec![vec![0]; 3]);
    }
}
