//! One stage of the learned iterative scheme: two convolutional pipelines
//! (current iterate and data-fit gradient) summed, merged down to one
//! channel, gated by a learned scalar and added to the iterate.

use crate::error::{Error, Result};
use crate::grids::SeededRng;

use super::conv::{relu_backward_in_place, relu_in_place, Conv};
use super::params::{he_init, ParamLayout};
use super::real::Real;

pub const DGD_KERNEL: usize = 5;
pub const INITIAL_SCALE: f64 = 0.01;
const WIDE: usize = 32;
const NARROW: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DgdArchitecture {
    layout: ParamLayout,
    ndim: usize,
    x_in: Conv,
    x_mid: Conv,
    g_in: Conv,
    g_mid: Conv,
    merge: Conv,
    out: Conv,
    scale: usize,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct BlockCache<T> {
    dims: Vec<usize>,
    x: Vec<T>,
    g: Vec<T>,
    sum: Vec<T>,
    hx1: Vec<T>,
    hx2: Vec<T>,
    hg1: Vec<T>,
    hg2: Vec<T>,
    merged: Vec<T>,
    pre_scale: Vec<T>,
    output: Vec<T>,
}

impl<T> BlockCache<T> {
    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }
}

pub struct BlockGradients<T> {
    pub dx: Option<Vec<T>>,
    pub dg: Option<Vec<T>>,
}

impl DgdArchitecture {
    pub fn new(ndim: usize) -> Self {
        Self::with_kernel(ndim, DGD_KERNEL)
    }

    pub fn with_kernel(ndim: usize, kernel: usize) -> Self {
        let mut layout = ParamLayout::new();
        let x_in = Conv::register(&mut layout, "x_in", 1, NARROW, kernel, ndim);
        let x_mid = Conv::register(&mut layout, "x_mid", NARROW, WIDE, kernel, ndim);
        let g_in = Conv::register(&mut layout, "g_in", 1, NARROW, kernel, ndim);
        let g_mid = Conv::register(&mut layout, "g_mid", NARROW, WIDE, kernel, ndim);
        let merge = Conv::register(&mut layout, "merge", WIDE, NARROW, kernel, ndim);
        let out = Conv::register(&mut layout, "out", NARROW, 1, kernel, ndim);
        let scale = layout.push("scale", &[]);
        Self {
            layout,
            ndim,
            x_in,
            x_mid,
            g_in,
            g_mid,
            merge,
            out,
            scale,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn kernel(&self) -> usize {
        self.out.kernel
    }

    pub fn scale_index(&self) -> usize {
        self.scale
    }

    /// He-normal kernels, zero biases, scale 0.01.
    pub fn init(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut p = he_init(&self.layout, rng);
        p[self.scale] = INITIAL_SCALE;
        p
    }

    fn check(&self, params_len: usize, x: usize, g: usize, dims: &[usize]) -> Result<()> {
        if params_len != self.layout.len() {
            return Err(Error::shape(format!(
                "dgd block: {params_len} parameters, layout expects {}",
                self.layout.len()
            )));
        }
        let n: usize = dims.iter().product();
        if dims.len() != self.ndim || x != n || g != n {
            return Err(Error::shape(format!(
                "dgd block on {:?}: iterate has {x} voxels, gradient {g}",
                dims
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        g: &[T],
        dims: &[usize],
    ) -> Result<(Vec<T>, BlockCache<T>)> {
        self.check(params.len(), x.len(), g.len(), dims)?;
        let mut hx1 = self.x_in.forward(params, x, dims)?;
        relu_in_place(&mut hx1);
        let mut hx2 = self.x_mid.forward(params, &hx1, dims)?;
        relu_in_place(&mut hx2);
        let mut hg1 = self.g_in.forward(params, g, dims)?;
        relu_in_place(&mut hg1);
        let mut hg2 = self.g_mid.forward(params, &hg1, dims)?;
        relu_in_place(&mut hg2);
        let sum: Vec<T> = hx2.iter().zip(&hg2).map(|(&a, &b)| a + b).collect();
        let mut merged = self.merge.forward(params, &sum, dims)?;
        relu_in_place(&mut merged);
        let pre_scale = self.out.forward(params, &merged, dims)?;
        let s = params[self.scale];
        let mut output: Vec<T> = x.iter().zip(&pre_scale).map(|(&a, &u)| a + s * u).collect();
        relu_in_place(&mut output);
        let cache = BlockCache {
            dims: dims.to_vec(),
            x: x.to_vec(),
            g: g.to_vec(),
            sum,
            hx1,
            hx2,
            hg1,
            hg2,
            merged,
            pre_scale,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Forward pass without keeping intermediates.
    pub fn apply<T: Real>(&self, params: &[T], x: &[T], g: &[T], dims: &[usize]) -> Result<Vec<T>> {
        Ok(self.forward(params, x, g, dims)?.0)
    }

    /// Accumulates parameter gradients of `<upstream, output>` into `grads`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &BlockCache<T>,
        upstream: &[T],
        grads: &mut [T],
        want_inputs: bool,
    ) -> Result<BlockGradients<T>> {
        if cache.is_empty() {
            return Err(Error::MissingCache);
        }
        self.layout.check(grads, "dgd block gradient")?;
        if upstream.len() != cache.output.len() {
            return Err(Error::shape("upstream gradient does not match block output"));
        }
        let dims = &cache.dims;
        let mut d_pre = upstream.to_vec();
        relu_backward_in_place(&mut d_pre, &cache.output);
        let s = params[self.scale];
        let ds: T = d_pre.iter().zip(&cache.pre_scale).map(|(&a, &b)| a * b).sum();
        grads[self.scale] = grads[self.scale] + ds;
        let d_out: Vec<T> = d_pre.iter().map(|&v| v * s).collect();
        let mut d_merged = self
            .out
            .backward(params, grads, &cache.merged, &d_out, dims, true)?
            .unwrap();
        relu_backward_in_place(&mut d_merged, &cache.merged);
        let d_sum = self
            .merge
            .backward(params, grads, &cache.sum, &d_merged, dims, true)?
            .unwrap();

        let mut d_hx2 = d_sum.clone();
        relu_backward_in_place(&mut d_hx2, &cache.hx2);
        let mut d_hx1 = self
            .x_mid
            .backward(params, grads, &cache.hx1, &d_hx2, dims, true)?
            .unwrap();
        relu_backward_in_place(&mut d_hx1, &cache.hx1);
        let dx_net = self
            .x_in
            .backward(params, grads, &cache.x, &d_hx1, dims, want_inputs)?;

        let mut d_hg2 = d_sum;
        relu_backward_in_place(&mut d_hg2, &cache.hg2);
        let mut d_hg1 = self
            .g_mid
            .backward(params, grads, &cache.hg1, &d_hg2, dims, true)?
            .unwrap();
        relu_backward_in_place(&mut d_hg1, &cache.hg1);
        let dg = self
            .g_in
            .backward(params, grads, &cache.g, &d_hg1, dims, want_inputs)?;

        let dx = dx_net.map(|net| d_pre.iter().zip(&net).map(|(&a, &b)| a + b).collect());
        Ok(BlockGradients { dx, dg })
    }
}
