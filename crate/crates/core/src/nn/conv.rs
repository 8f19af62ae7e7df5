//! Same-size zero-padded convolution (cross-correlation) on n-D grids via
//! im2col + gemm, plus the pointwise and resampling layers around it.
//! Activations are channel-major: `data[c * voxels + voxel]`.

use crate::error::{Error, Result};
use crate::grids::unravel;

use super::params::ParamLayout;
use super::real::{gemm, Real};

/// Unfolds `channels x voxels` into `(channels * kernel^n) x voxels`.
pub fn im2col<T: Real>(input: &[T], dims: &[usize], channels: usize, kernel: usize) -> Vec<T> {
    let n: usize = dims.iter().product();
    let taps = kernel.pow(dims.len() as u32);
    let mut cols = vec![T::zero(); channels * taps * n];
    let half = (kernel / 2) as isize;
    let last = *dims.last().unwrap();
    let rows = n / last;
    let outer_dims = &dims[..dims.len() - 1];
    let kdims = vec![kernel; dims.len()];
    for tap in 0..taps {
        let shift: Vec<isize> = unravel(&kdims, tap).iter().map(|&o| o as isize - half).collect();
        let ds = shift[dims.len() - 1];
        let lo = (-ds).max(0) as usize;
        let hi = (last as isize - ds).min(last as isize).max(0) as usize;
        for row in 0..rows {
            let pos = unravel(outer_dims, row);
            let mut src_row = 0usize;
            let mut ok = true;
            for (axis, &p) in pos.iter().enumerate() {
                let q = p as isize + shift[axis];
                if q < 0 || q >= dims[axis] as isize {
                    ok = false;
                    break;
                }
                src_row = src_row * dims[axis] + q as usize;
            }
            if !ok || lo >= hi {
                continue;
            }
            let off = (lo as isize + ds) as usize;
            for c in 0..channels {
                let src = c * n + src_row * last + off;
                let dst = (c * taps + tap) * n + row * last;
                cols[dst + lo..dst + hi].copy_from_slice(&input[src..src + hi - lo]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub fn col2im<T: Real>(cols: &[T], dims: &[usize], channels: usize, kernel: usize) -> Vec<T> {
    let n: usize = dims.iter().product();
    let taps = kernel.pow(dims.len() as u32);
    let mut out = vec![T::zero(); channels * n];
    let half = (kernel / 2) as isize;
    let last = *dims.last().unwrap();
    let rows = n / last;
    let outer_dims = &dims[..dims.len() - 1];
    let kdims = vec![kernel; dims.len()];
    for tap in 0..taps {
        let shift: Vec<isize> = unravel(&kdims, tap).iter().map(|&o| o as isize - half).collect();
        let ds = shift[dims.len() - 1];
        let lo = (-ds).max(0) as usize;
        let hi = (last as isize - ds).min(last as isize).max(0) as usize;
        for row in 0..rows {
            let pos = unravel(outer_dims, row);
            let mut src_row = 0usize;
            let mut ok = true;
            for (axis, &p) in pos.iter().enumerate() {
                let q = p as isize + shift[axis];
                if q < 0 || q >= dims[axis] as isize {
                    ok = false;
                    break;
                }
                src_row = src_row * dims[axis] + q as usize;
            }
            if !ok || lo >= hi {
                continue;
            }
            let off = (lo as isize + ds) as usize;
            for c in 0..channels {
                let src = c * n + src_row * last + off;
                let dst = (c * taps + tap) * n + row * last;
                for (o, &v) in out[src..src + hi - lo].iter_mut().zip(&cols[dst + lo..dst + hi]) {
                    *o = *o + v;
                }
            }
        }
    }
    out
}

/// Pixel-major unfold: `voxels x (channels * kernel^n)`, the transpose of
/// [`im2col`]. The weight gradient reads it row-major, which keeps the
/// large operand of that product on the fast packing path.
pub fn im2col_pixel_major<T: Real>(input: &[T], dims: &[usize], channels: usize, kernel: usize) -> Vec<T> {
    let n: usize = dims.iter().product();
    let ndim = dims.len();
    let taps = kernel.pow(ndim as u32);
    let width = channels * taps;
    let mut out = vec![T::zero(); n * width];
    let half = kernel / 2;
    let last = dims[ndim - 1];
    // taps come in runs of `kernel` that are contiguous along the last axis
    let groups = taps / kernel;
    let gdims = vec![kernel; ndim - 1];
    let group_shift: Vec<Vec<isize>> = (0..groups)
        .map(|g| unravel(&gdims, g).iter().map(|&o| o as isize - half as isize).collect())
        .collect();
    let outer_dims = &dims[..ndim - 1];
    let mut pos = vec![0usize; ndim - 1];
    for row in 0..n / last {
        let src_rows: Vec<Option<usize>> = group_shift
            .iter()
            .map(|s| {
                let mut flat = 0usize;
                for (a, (&d, &q)) in s.iter().zip(&pos).enumerate() {
                    let v = q as isize + d;
                    if v < 0 || v >= outer_dims[a] as isize {
                        return None;
                    }
                    flat = flat * outer_dims[a] + v as usize;
                }
                Some(flat)
            })
            .collect();
        for j in 0..last {
            let p = row * last + j;
            // kernel offsets kept inside the row: j + o - half in [0, last)
            let lo = half.saturating_sub(j);
            let hi = kernel.min(last + half - j);
            let out_row = &mut out[p * width..(p + 1) * width];
            for (g, src_row) in src_rows.iter().enumerate() {
                let Some(sr) = src_row else { continue };
                let start = sr * last + j + lo - half;
                for c in 0..channels {
                    let src = c * n + start;
                    let dst = c * taps + g * kernel;
                    out_row[dst + lo..dst + hi].copy_from_slice(&input[src..src + hi - lo]);
                }
            }
        }
        for a in (0..ndim - 1).rev() {
            pos[a] += 1;
            if pos[a] < outer_dims[a] {
                break;
            }
            pos[a] = 0;
        }
    }
    out
}

/// A convolution layer's position inside a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub ndim: usize,
    weight: usize,
    bias: usize,
}

impl Conv {
    /// Registers `{name}.weight` (`out x in x kernel^ndim`) and `{name}.bias`.
    pub fn register(
        layout: &mut ParamLayout,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        ndim: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel extent must be odd");
        let mut shape = vec![out_ch, in_ch];
        shape.extend(std::iter::repeat_n(kernel, ndim));
        let weight = layout.push(format!("{name}.weight"), &shape);
        let bias = layout.push(format!("{name}.bias"), &[out_ch]);
        Self {
            in_ch,
            out_ch,
            kernel,
            ndim,
            weight,
            bias,
        }
    }

    fn taps(&self) -> usize {
        self.kernel.pow(self.ndim as u32)
    }

    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.taps()
    }

    fn check_input(&self, len: usize, dims: &[usize]) -> Result<usize> {
        let n: usize = dims.iter().product();
        if dims.len() != self.ndim || len != self.in_ch * n {
            return Err(Error::shape(format!(
                "conv expects {} channels on a {}-d grid, got {} values on {:?}",
                self.in_ch, self.ndim, len, dims
            )));
        }
        Ok(n)
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &[T], dims: &[usize]) -> Result<Vec<T>> {
        let n = self.check_input(input.len(), dims)?;
        let cols = im2col(input, dims, self.in_ch, self.kernel);
        let mut out = vec![T::zero(); self.out_ch * n];
        for (c, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(params[self.bias + c]);
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        gemm(false, false, self.out_ch, n, self.in_ch * self.taps(), w, &cols, T::one(), &mut out);
        Ok(out)
    }

    /// Accumulates weight/bias gradients into `grads` given the layer's
    /// forward input, and returns the input gradient when `want_input` is set.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        grads: &mut [T],
        input: &[T],
        dout: &[T],
        dims: &[usize],
        want_input: bool,
    ) -> Result<Option<Vec<T>>> {
        let n: usize = dims.iter().product();
        let k = self.in_ch * self.taps();
        if dout.len() != self.out_ch * n || input.len() != self.in_ch * n {
            return Err(Error::MissingCache);
        }
        let wlen = self.weight_len();
        let cols_t = im2col_pixel_major(input, dims, self.in_ch, self.kernel);
        gemm(
            false,
            false,
            self.out_ch,
            k,
            n,
            dout,
            &cols_t,
            T::one(),
            &mut grads[self.weight..self.weight + wlen],
        );
        for (c, chunk) in dout.chunks(n).enumerate() {
            let s: T = chunk.iter().copied().sum();
            grads[self.bias + c] = grads[self.bias + c] + s;
        }
        if !want_input {
            return Ok(None);
        }
        let w = &params[self.weight..self.weight + wlen];
        let mut dcols = vec![T::zero(); k * n];
        gemm(true, false, k, n, self.out_ch, w, dout, T::zero(), &mut dcols);
        Ok(Some(col2im(&dcols, dims, self.in_ch, self.kernel)))
    }
}

pub fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v.iter_mut() {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the activation was not strictly positive.
pub fn relu_backward_in_place<T: Real>(grad: &mut [T], activation: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if !(a > T::zero()) {
            *g = T::zero();
        }
    }
}

pub fn halved_dims(dims: &[usize]) -> Result<Vec<usize>> {
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::shape(format!("cannot halve grid {dims:?}")));
    }
    Ok(dims.iter().map(|d| d / 2).collect())
}

fn coarse_index(dims: &[usize], coarse: &[usize], flat: usize) -> usize {
    let pos = unravel(dims, flat);
    pos.iter()
        .zip(coarse)
        .fold(0, |acc, (&p, &d)| acc * d + p / 2)
}

/// 2x max pooling per axis. Returns the pooled map and, per output value,
/// the fine-grid index of the winner (first maximum in scan order).
pub fn maxpool<T: Real>(input: &[T], dims: &[usize], channels: usize) -> Result<(Vec<T>, Vec<usize>)> {
    let coarse = halved_dims(dims)?;
    let n: usize = dims.iter().product();
    let m: usize = coarse.iter().product();
    let mut out = vec![T::neg_infinity(); channels * m];
    let mut arg = vec![usize::MAX; channels * m];
    for i in 0..n {
        let j = coarse_index(dims, &coarse, i);
        for c in 0..channels {
            let v = input[c * n + i];
            if arg[c * m + j] == usize::MAX || v > out[c * m + j] {
                out[c * m + j] = v;
                arg[c * m + j] = c * n + i;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_backward<T: Real>(dout: &[T], arg: &[usize], fine_len: usize) -> Vec<T> {
    let mut din = vec![T::zero(); fine_len];
    for (&g, &a) in dout.iter().zip(arg) {
        din[a] = din[a] + g;
    }
    din
}

/// Nearest-neighbour 2x upsampling onto `dims` (the fine grid).
pub fn upsample<T: Real>(input: &[T], dims: &[usize], channels: usize) -> Result<Vec<T>> {
    let coarse = halved_dims(dims)?;
    let n: usize = dims.iter().product();
    let m: usize = coarse.iter().product();
    let mut out = vec![T::zero(); channels * n];
    for i in 0..n {
        let j = coarse_index(dims, &coarse, i);
        for c in 0..channels {
            out[c * n + i] = input[c * m + j];
        }
    }
    Ok(out)
}

pub fn upsample_backward<T: Real>(dout: &[T], dims: &[usize], channels: usize) -> Result<Vec<T>> {
    let coarse = halved_dims(dims)?;
    let n: usize = dims.iter().product();
    let m: usize = coarse.iter().product();
    let mut din = vec![T::zero(); channels * m];
    for i in 0..n {
        let j = coarse_index(dims, &coarse, i);
        for c in 0..channels {
            din[c * m + j] = din[c * m + j] + dout[c * n + i];
        }
    }
    Ok(din)
}
