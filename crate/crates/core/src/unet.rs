//! Learned post-processing baseline: a three-level encoder-decoder with
//! skip connections that predicts a residual update to `x_0 = A*y`.

use std::fmt::Write as _;
use std::path::Path;

use crate::acoustic::{AcousticOperator, SensorData};
use crate::error::{Error, Result};
use crate::grids::{ScalarField, SeededRng};
use crate::io;
use crate::nn::conv::{
    halved_dims, maxpool, maxpool_backward, relu_backward_in_place, relu_in_place, upsample,
    upsample_backward, Conv,
};
use crate::nn::io as weights_io;
use crate::nn::loss::{loss_and_grad, NormPenalty};
use crate::nn::params::{cast, he_init, Adam, ParamLayout};
use crate::nn::train::{batch_schedule, minibatch_step};
use crate::nn::Real;
use crate::par;

pub const UNET_MAGIC: &[u8; 4] = b"UNTW";
pub const UNET_KERNEL: usize = 3;
pub const DEFAULT_UNET_LR: f64 = 1e-4;
pub const DEFAULT_UNET_EPOCHS: usize = 30;
const INITIAL_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnetArchitecture {
    layout: ParamLayout,
    ndim: usize,
    enc1: Conv,
    enc2: Conv,
    enc3: Conv,
    up2: Conv,
    dec2: Conv,
    up1: Conv,
    dec1: Conv,
    head: Conv,
    scale: usize,
}

#[derive(Debug, Clone, Default)]
pub struct UnetCache<T> {
    dims: Vec<usize>,
    x0: Vec<T>,
    e1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<usize>,
    e2: Vec<T>,
    p2: Vec<T>,
    arg2: Vec<usize>,
    e3: Vec<T>,
    up_e3: Vec<T>,
    u2: Vec<T>,
    cat2: Vec<T>,
    d2: Vec<T>,
    up_d2: Vec<T>,
    u1: Vec<T>,
    cat1: Vec<T>,
    d1: Vec<T>,
    head: Vec<T>,
    output: Vec<T>,
}

fn concat<T: Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl UnetArchitecture {
    pub fn new(ndim: usize) -> Self {
        let k = UNET_KERNEL;
        let mut layout = ParamLayout::new();
        let enc1 = Conv::register(&mut layout, "enc1", 1, 8, k, ndim);
        let enc2 = Conv::register(&mut layout, "enc2", 8, 16, k, ndim);
        let enc3 = Conv::register(&mut layout, "enc3", 16, 32, k, ndim);
        let up2 = Conv::register(&mut layout, "up2", 32, 16, k, ndim);
        let dec2 = Conv::register(&mut layout, "dec2", 32, 16, k, ndim);
        let up1 = Conv::register(&mut layout, "up1", 16, 8, k, ndim);
        let dec1 = Conv::register(&mut layout, "dec1", 16, 8, k, ndim);
        let head = Conv::register(&mut layout, "head", 8, 1, k, ndim);
        let scale = layout.push("scale", &[]);
        Self {
            layout,
            ndim,
            enc1,
            enc2,
            enc3,
            up2,
            dec2,
            up1,
            dec1,
            head,
            scale,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn scale_index(&self) -> usize {
        self.scale
    }

    pub fn init(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut p = he_init(&self.layout, rng);
        p[self.scale] = INITIAL_SCALE;
        p
    }

    fn levels(&self, dims: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if dims.len() != self.ndim || dims.iter().any(|d| d % 4 != 0) {
            return Err(Error::shape(format!(
                "u-net needs a {}-d grid divisible by 4, got {dims:?}",
                self.ndim
            )));
        }
        let half = halved_dims(dims)?;
        let quarter = halved_dims(&half)?;
        Ok((half, quarter))
    }

    pub fn forward<T: Real>(&self, params: &[T], x0: &[T], dims: &[usize]) -> Result<(Vec<T>, UnetCache<T>)> {
        self.layout.check(params, "u-net")?;
        let (half, quarter) = self.levels(dims)?;
        let mut e1 = self.enc1.forward(params, x0, dims)?;
        relu_in_place(&mut e1);
        let (p1, arg1) = maxpool(&e1, dims, 8)?;
        let mut e2 = self.enc2.forward(params, &p1, &half)?;
        relu_in_place(&mut e2);
        let (p2, arg2) = maxpool(&e2, &half, 16)?;
        let mut e3 = self.enc3.forward(params, &p2, &quarter)?;
        relu_in_place(&mut e3);
        let up_e3 = upsample(&e3, &half, 32)?;
        let mut u2 = self.up2.forward(params, &up_e3, &half)?;
        relu_in_place(&mut u2);
        let cat2 = concat(&u2, &e2);
        let mut d2 = self.dec2.forward(params, &cat2, &half)?;
        relu_in_place(&mut d2);
        let up_d2 = upsample(&d2, dims, 16)?;
        let mut u1 = self.up1.forward(params, &up_d2, dims)?;
        relu_in_place(&mut u1);
        let cat1 = concat(&u1, &e1);
        let mut d1 = self.dec1.forward(params, &cat1, dims)?;
        relu_in_place(&mut d1);
        let head = self.head.forward(params, &d1, dims)?;
        let s = params[self.scale];
        let mut output: Vec<T> = x0.iter().zip(&head).map(|(&a, &h)| a + s * h).collect();
        relu_in_place(&mut output);
        let cache = UnetCache {
            dims: dims.to_vec(),
            x0: x0.to_vec(),
            e1,
            p1,
            arg1,
            e2,
            p2,
            arg2,
            e3,
            up_e3,
            u2,
            cat2,
            d2,
            up_d2,
            u1,
            cat1,
            d1,
            head,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    pub fn apply<T: Real>(&self, params: &[T], x0: &[T], dims: &[usize]) -> Result<Vec<T>> {
        Ok(self.forward(params, x0, dims)?.0)
    }

    /// Accumulates parameter gradients of `<upstream, output>`; returns the
    /// input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &UnetCache<T>,
        upstream: &[T],
        grads: &mut [T],
        want_input: bool,
    ) -> Result<Option<Vec<T>>> {
        if cache.output.is_empty() {
            return Err(Error::MissingCache);
        }
        self.layout.check(grads, "u-net gradient")?;
        if upstream.len() != cache.output.len() {
            return Err(Error::shape("upstream gradient does not match u-net output"));
        }
        let dims = &cache.dims;
        let (half, quarter) = self.levels(dims)?;
        let n: usize = dims.iter().product();
        let nh: usize = half.iter().product();

        let mut d_pre = upstream.to_vec();
        relu_backward_in_place(&mut d_pre, &cache.output);
        let s = params[self.scale];
        let ds: T = d_pre.iter().zip(&cache.head).map(|(&a, &b)| a * b).sum();
        grads[self.scale] = grads[self.scale] + ds;
        let d_head: Vec<T> = d_pre.iter().map(|&v| v * s).collect();

        let mut d_d1 = self.head.backward(params, grads, &cache.d1, &d_head, dims, true)?.unwrap();
        relu_backward_in_place(&mut d_d1, &cache.d1);
        let d_cat1 = self.dec1.backward(params, grads, &cache.cat1, &d_d1, dims, true)?.unwrap();
        let (d_u1, d_e1_skip) = d_cat1.split_at(8 * n);
        let mut d_u1 = d_u1.to_vec();
        relu_backward_in_place(&mut d_u1, &cache.u1);
        let d_up_d2 = self.up1.backward(params, grads, &cache.up_d2, &d_u1, dims, true)?.unwrap();
        let mut d_d2 = upsample_backward(&d_up_d2, dims, 16)?;
        relu_backward_in_place(&mut d_d2, &cache.d2);
        let d_cat2 = self.dec2.backward(params, grads, &cache.cat2, &d_d2, &half, true)?.unwrap();
        let (d_u2, d_e2_skip) = d_cat2.split_at(16 * nh);
        let mut d_u2 = d_u2.to_vec();
        relu_backward_in_place(&mut d_u2, &cache.u2);
        let d_up_e3 = self.up2.backward(params, grads, &cache.up_e3, &d_u2, &half, true)?.unwrap();
        let mut d_e3 = upsample_backward(&d_up_e3, &half, 32)?;
        relu_backward_in_place(&mut d_e3, &cache.e3);
        let d_p2 = self.enc3.backward(params, grads, &cache.p2, &d_e3, &quarter, true)?.unwrap();
        let mut d_e2 = maxpool_backward(&d_p2, &cache.arg2, 16 * nh);
        for (a, &b) in d_e2.iter_mut().zip(d_e2_skip) {
            *a = *a + b;
        }
        relu_backward_in_place(&mut d_e2, &cache.e2);
        let d_p1 = self.enc2.backward(params, grads, &cache.p1, &d_e2, &half, true)?.unwrap();
        let mut d_e1 = maxpool_backward(&d_p1, &cache.arg1, 8 * n);
        for (a, &b) in d_e1.iter_mut().zip(d_e1_skip) {
            *a = *a + b;
        }
        relu_backward_in_place(&mut d_e1, &cache.e1);
        let d_x0 = self.enc1.backward(params, grads, &cache.x0, &d_e1, dims, want_input)?;
        Ok(d_x0.map(|net| d_pre.iter().zip(&net).map(|(&a, &b)| a + b).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub penalty: Option<(f64, f64)>,
}

impl UnetHyper {
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: DEFAULT_UNET_EPOCHS,
            batch: crate::dgd::DEFAULT_BATCH,
            lr: DEFAULT_UNET_LR,
            seed,
            penalty: Some((
                crate::nn::loss::NORM_PENALTY_WEIGHT,
                crate::nn::loss::NORM_PENALTY_FRACTION,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnetLog {
    pub hyper: Option<UnetHyper>,
    pub losses: Vec<f64>,
    pub identity_loss: f64,
    pub final_loss: f64,
    pub transfer: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetModel {
    pub ndim: usize,
    pub weights: Vec<f32>,
    pub log: UnetLog,
}

/// Training pairs: initial reconstruction and target, single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct UnetData {
    pub dims: Vec<usize>,
    pub x0: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
}

impl UnetData {
    pub fn from_fields(pairs: &[(ScalarField, ScalarField)]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::invalid("u-net training needs at least one pair"))?;
        let dims = first.0.dims().to_vec();
        for (x0, t) in pairs {
            if x0.dims() != dims.as_slice() || t.dims() != dims.as_slice() {
                return Err(Error::shape("u-net pairs must share one grid"));
            }
        }
        Ok(Self {
            dims,
            x0: pairs.iter().map(|(x, _)| x.data().iter().map(|&v| v as f32).collect()).collect(),
            target: pairs.iter().map(|(_, t)| t.data().iter().map(|&v| v as f32).collect()).collect(),
        })
    }
}

fn mean_loss(
    arch: &UnetArchitecture,
    weights: &[f32],
    data: &UnetData,
    penalty: Option<NormPenalty>,
) -> Result<f64> {
    let losses = par::map_range(data.x0.len(), |i| -> Result<f64> {
        let out = arch.apply(weights, &data.x0[i], &data.dims)?;
        Ok(loss_and_grad(&out, &data.target[i], penalty)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.x0.len() as f64)
}

fn fit(
    arch: &UnetArchitecture,
    data: &UnetData,
    hyper: &UnetHyper,
    start: Option<&[f32]>,
) -> Result<(Vec<f32>, Vec<f64>, f64, f64)> {
    if data.x0.is_empty() {
        return Err(Error::invalid("u-net training needs at least one pair"));
    }
    if hyper.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let voxels: usize = data.dims.iter().product();
    let penalty = hyper
        .penalty
        .map(|(w, f)| NormPenalty::with_constants(w, f, voxels));
    let mut rng = SeededRng::new(hyper.seed);
    let mut weights: Vec<f32> = match start {
        Some(w) => {
            arch.layout().check(w, "u-net start")?;
            w.to_vec()
        }
        None => cast(&arch.init(&mut rng)),
    };
    let steps = hyper.epochs * data.x0.len().div_ceil(hyper.batch);
    let schedule = batch_schedule(data.x0.len(), hyper.batch, steps, &mut rng);
    let mut adam = Adam::new(weights.len(), hyper.lr);
    let mut losses = Vec::with_capacity(steps);
    for batch in &schedule {
        let loss = minibatch_step(&mut weights, &mut adam, batch, |w, i| {
            let (out, cache) = arch.forward(w, &data.x0[i], &data.dims)?;
            let (loss, up) = loss_and_grad(&out, &data.target[i], penalty)?;
            let mut grads = arch.layout().zeros::<f32>();
            arch.backward(w, &cache, &up, &mut grads, false)?;
            Ok((loss, grads))
        })?;
        losses.push(loss);
    }
    let identity = mean_loss(arch, &arch.layout().zeros::<f32>(), data, penalty)?;
    let last = mean_loss(arch, &weights, data, penalty)?;
    Ok((weights, losses, identity, last))
}

/// Adam on loss plus the norm penalty over `{x_0, x_true}` pairs.
pub fn train_unet(data: &UnetData, hyper: &UnetHyper) -> Result<UnetModel> {
    let arch = UnetArchitecture::new(data.dims.len());
    let (weights, losses, identity_loss, final_loss) = fit(&arch, data, hyper, None)?;
    Ok(UnetModel {
        ndim: data.dims.len(),
        weights,
        log: UnetLog {
            hyper: Some(hyper.clone()),
            losses,
            identity_loss,
            final_loss,
            transfer: None,
        },
    })
}

/// Continues training from `model` on new pairs with the given rate.
pub fn transfer_update_unet(
    model: &UnetModel,
    data: &UnetData,
    lr: f64,
    epochs: usize,
    hyper: &UnetHyper,
) -> Result<UnetModel> {
    let arch = model.architecture();
    let h = UnetHyper {
        lr,
        epochs,
        ..hyper.clone()
    };
    let (weights, losses, identity_loss, final_loss) = fit(&arch, data, &h, Some(&model.weights))?;
    Ok(UnetModel {
        ndim: model.ndim,
        weights,
        log: UnetLog {
            hyper: model.log.hyper.clone(),
            losses,
            identity_loss,
            final_loss,
            transfer: Some((lr, epochs)),
        },
    })
}

#[derive(Debug, Clone)]
pub struct UnetReconstruction {
    pub x0: ScalarField,
    pub output: ScalarField,
    pub seconds: f64,
}

impl UnetModel {
    pub fn architecture(&self) -> UnetArchitecture {
        UnetArchitecture::new(self.ndim)
    }

    pub fn zeros(ndim: usize) -> Self {
        Self {
            ndim,
            weights: UnetArchitecture::new(ndim).layout().zeros(),
            log: UnetLog::default(),
        }
    }

    pub fn apply(&self, x0: &ScalarField) -> Result<ScalarField> {
        let input: Vec<f32> = x0.data().iter().map(|&v| v as f32).collect();
        let out = self.architecture().apply(&self.weights, &input, x0.dims())?;
        Ok(x0.with_data(out.into_iter().map(f64::from).collect()))
    }

    /// One adjoint application, then the network.
    pub fn reconstruct(&self, op: &AcousticOperator, y: &SensorData) -> Result<UnetReconstruction> {
        let started = std::time::Instant::now();
        let x0 = op.adjoint(y)?;
        let output = self.apply(&x0)?;
        Ok(UnetReconstruction {
            x0,
            output,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    pub fn weights_bytes(&self) -> Result<Vec<u8>> {
        weights_io::encode(UNET_MAGIC, self.architecture().layout(), std::slice::from_ref(&self.weights))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        weights_io::save(
            &dir.join("weights.bin"),
            UNET_MAGIC,
            self.architecture().layout(),
            std::slice::from_ref(&self.weights),
        )?;
        let mut meta = vec![("ndim".to_string(), self.ndim.to_string())];
        if let Some(h) = &self.log.hyper {
            meta.push(("epochs".into(), h.epochs.to_string()));
            meta.push(("batch".into(), h.batch.to_string()));
            meta.push(("lr".into(), format!("{:e}", h.lr)));
            meta.push(("seed".into(), h.seed.to_string()));
        }
        if let Some((lr, epochs)) = self.log.transfer {
            meta.push(("transfer_lr".into(), format!("{lr:e}")));
            meta.push(("transfer_epochs".into(), epochs.to_string()));
        }
        meta.push(("identity_loss".into(), format!("{:.10e}", self.log.identity_loss)));
        meta.push(("final_loss".into(), format!("{:.10e}", self.log.final_loss)));
        io::write_manifest(&dir.join("model.txt"), &meta)?;
        let mut csv = String::from("step,loss\n");
        for (s, l) in self.log.losses.iter().enumerate() {
            let _ = writeln!(csv, "{s},{l:.10e}");
        }
        io::write_text(&dir.join("losses.csv"), &csv)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.txt");
        let meta = io::read_manifest(&meta_path)?;
        let ndim: usize = io::manifest_value(&meta, "ndim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&meta_path, "missing or bad ndim"))?;
        let arch = UnetArchitecture::new(ndim);
        let mut stages = weights_io::load(&dir.join("weights.bin"), UNET_MAGIC, arch.layout())?;
        if stages.len() != 1 {
            return Err(Error::format(dir.join("weights.bin"), "expected exactly one stage"));
        }
        Ok(Self {
            ndim,
            weights: stages.pop().unwrap(),
            log: UnetLog::default(),
        })
    }
}
