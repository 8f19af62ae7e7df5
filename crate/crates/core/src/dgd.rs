//! Greedy stage-wise training of the learned iterative scheme, its
//! evaluation, and fine-tuning on a shifted domain.
//!
//! Each stage sees only precomputed `(iterate, data-fit gradient, target)`
//! triples, so network optimization never touches the acoustic operator.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::acoustic::{AcousticOperator, SensorData};
use crate::error::{Error, Result};
use crate::grids::{ScalarField, SeededRng};
use crate::io::{self, ContentHash};
use crate::metrics::unbiased_rel_error_slice;
use crate::nn::block::DgdArchitecture;
use crate::nn::loss::{loss_and_grad, NormPenalty};
use crate::nn::params::{cast, Adam};
use crate::nn::train::{batch_schedule, minibatch_step};
use crate::nn::io as weights_io;
use crate::par;
use crate::phantom::DatasetSample;

pub const DGD_MAGIC: &[u8; 4] = b"DGDW";
pub const DEFAULT_STAGES: usize = 5;
pub const DEFAULT_BATCH: usize = 2;
pub const DEFAULT_LR: f64 = 5e-5;
pub const DEFAULT_TRANSFER_LR: f64 = 1e-5;
pub const DEFAULT_TRANSFER_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct StageHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Applied at the first stage only.
    pub penalty: Option<(f64, f64)>,
}

impl StageHyper {
    pub fn desk(seed: u64) -> Self {
        Self {
            steps: 2000,
            batch: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            seed,
            penalty: Some((
                crate::nn::loss::NORM_PENALTY_WEIGHT,
                crate::nn::loss::NORM_PENALTY_FRACTION,
            )),
        }
    }

    fn penalty_for(&self, stage: usize, voxels: usize) -> Option<NormPenalty> {
        match self.penalty {
            Some((w, f)) if stage == 0 => Some(NormPenalty::with_constants(w, f, voxels)),
            _ => None,
        }
    }
}

/// Inputs of one stage for every training sample, in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StageData {
    pub dims: Vec<usize>,
    pub x: Vec<Vec<f32>>,
    pub g: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
}

impl StageData {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("stage training needs at least one sample"));
        }
        let n: usize = self.dims.iter().product();
        if self.g.len() != self.len() || self.target.len() != self.len() {
            return Err(Error::shape("stage inputs, gradients and targets differ in count"));
        }
        for i in 0..self.len() {
            if self.x[i].len() != n || self.g[i].len() != n || self.target[i].len() != n {
                return Err(Error::shape(format!("stage sample {i} is not on grid {:?}", self.dims)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub weights: Vec<f32>,
    /// Mean mini-batch loss at every optimizer step.
    pub losses: Vec<f64>,
    /// Mean loss over all samples with zero weights (the identity map).
    pub identity_loss: f64,
    /// Mean loss over all samples with the trained weights.
    pub final_loss: f64,
}

fn mean_loss(
    arch: &DgdArchitecture,
    weights: &[f32],
    data: &StageData,
    penalty: Option<NormPenalty>,
) -> Result<f64> {
    let losses: Vec<Result<f64>> = par::map_range(data.len(), |i| {
        let out = arch.apply(weights, &data.x[i], &data.g[i], &data.dims)?;
        Ok(loss_and_grad(&out, &data.target[i], penalty)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}

/// Trains one stage from `start` (or a fresh He draw seeded by
/// `hyper.seed`) for `hyper.steps` Adam steps.
pub fn train_stage(
    arch: &DgdArchitecture,
    stage: usize,
    data: &StageData,
    hyper: &StageHyper,
    start: Option<&[f32]>,
) -> Result<StageResult> {
    data.check()?;
    if hyper.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let voxels: usize = data.dims.iter().product();
    let penalty = hyper.penalty_for(stage, voxels);
    let mut rng = SeededRng::new(hyper.seed);
    let mut weights: Vec<f32> = match start {
        Some(w) => {
            arch.layout().check(w, "stage start")?;
            w.to_vec()
        }
        None => cast(&arch.init(&mut rng)),
    };
    let schedule = batch_schedule(data.len(), hyper.batch, hyper.steps, &mut rng);
    let mut adam = Adam::new(weights.len(), hyper.lr);
    let mut losses = Vec::with_capacity(hyper.steps);
    for batch in &schedule {
        let loss = minibatch_step(&mut weights, &mut adam, batch, |w, i| {
            let (out, cache) = arch.forward(w, &data.x[i], &data.g[i], &data.dims)?;
            let (loss, up) = loss_and_grad(&out, &data.target[i], penalty)?;
            let mut grads = arch.layout().zeros::<f32>();
            arch.backward(w, &cache, &up, &mut grads, false)?;
            Ok((loss, grads))
        })?;
        losses.push(loss);
    }
    let identity_loss = mean_loss(arch, &arch.layout().zeros::<f32>(), data, penalty)?;
    let final_loss = mean_loss(arch, &weights, data, penalty)?;
    Ok(StageResult {
        weights,
        losses,
        identity_loss,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub hyper: Option<StageHyper>,
    pub stage_losses: Vec<Vec<f64>>,
    pub identity_loss: Vec<f64>,
    pub final_loss: Vec<f64>,
    /// Mean training err of `x_0 .. x_K`.
    pub staged_err: Vec<f64>,
    pub transfer: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgdModel {
    pub ndim: usize,
    pub kernel: usize,
    pub stages: Vec<Vec<f32>>,
    pub log: TrainingLog,
}

impl DgdModel {
    pub fn architecture(&self) -> DgdArchitecture {
        DgdArchitecture::with_kernel(self.ndim, self.kernel)
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// All stages at zero weights: every step is `ReLU(x)`.
    pub fn zeros(ndim: usize, stages: usize) -> Self {
        let arch = DgdArchitecture::new(ndim);
        Self {
            ndim,
            kernel: arch.kernel(),
            stages: vec![arch.layout().zeros(); stages],
            log: TrainingLog::default(),
        }
    }

    pub fn weights_bytes(&self) -> Result<Vec<u8>> {
        weights_io::encode(DGD_MAGIC, self.architecture().layout(), &self.stages)
    }

    /// `weights.bin`, `model.txt` and `losses.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        weights_io::save(&dir.join("weights.bin"), DGD_MAGIC, self.architecture().layout(), &self.stages)?;
        let mut meta = vec![
            ("ndim".to_string(), self.ndim.to_string()),
            ("kernel".to_string(), self.kernel.to_string()),
            ("stages".to_string(), self.stages.len().to_string()),
        ];
        if let Some(h) = &self.log.hyper {
            meta.push(("steps_per_stage".into(), h.steps.to_string()));
            meta.push(("batch".into(), h.batch.to_string()));
            meta.push(("lr".into(), format!("{:e}", h.lr)));
            meta.push(("seed".into(), h.seed.to_string()));
        }
        if let Some((lr, epochs)) = self.log.transfer {
            meta.push(("transfer_lr".into(), format!("{lr:e}")));
            meta.push(("transfer_epochs".into(), epochs.to_string()));
        }
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.10e}")).collect::<Vec<_>>().join(" ");
        meta.push(("identity_loss".into(), join(&self.log.identity_loss)));
        meta.push(("final_loss".into(), join(&self.log.final_loss)));
        meta.push(("staged_err".into(), join(&self.log.staged_err)));
        io::write_manifest(&dir.join("model.txt"), &meta)?;
        let mut csv = String::from("stage,step,loss\n");
        for (k, losses) in self.log.stage_losses.iter().enumerate() {
            for (s, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{k},{s},{l:.10e}");
            }
        }
        io::write_text(&dir.join("losses.csv"), &csv)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("model.txt");
        let meta = io::read_manifest(&meta_path)?;
        let get = |key: &str| -> Result<usize> {
            io::manifest_value(&meta, key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(&meta_path, format!("missing or bad {key}")))
        };
        let (ndim, kernel) = (get("ndim")?, get("kernel")?);
        let arch = DgdArchitecture::with_kernel(ndim, kernel);
        let stages = weights_io::load(&dir.join("weights.bin"), DGD_MAGIC, arch.layout())?;
        if stages.len() != get("stages")? {
            return Err(Error::format(&meta_path, "stage count disagrees with weights file"));
        }
        Ok(Self {
            ndim,
            kernel,
            stages,
            log: TrainingLog::default(),
        })
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `A*(A x - y)` for every sample, in input order.
fn data_fit_gradients(
    op: &AcousticOperator,
    xs: &[Vec<f32>],
    ys: &[&SensorData],
) -> Result<Vec<Vec<f32>>> {
    let geometry = op.geometry();
    par::map_range(xs.len(), |i| {
        let x = ScalarField::new(geometry.dims().to_vec(), geometry.spacing(), to_f64(&xs[i]))?;
        Ok(to_f32(op.data_fit_gradient(&x, ys[i])?.data()))
    })
    .into_iter()
    .collect()
}

/// Gradient tensors of one stage, keyed by everything they depend on.
struct GradientCache {
    dir: PathBuf,
}

impl GradientCache {
    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("gradients-{key}.bin"))
    }

    fn load(&self, key: &str, count: usize, voxels: usize) -> Option<Vec<Vec<f32>>> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        if bytes.len() != 4 * count * voxels {
            return None;
        }
        let flat: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Some(flat.chunks(voxels).map(<[f32]>::to_vec).collect())
    }

    fn store(&self, key: &str, grads: &[Vec<f32>]) -> Result<()> {
        io::create_dir(&self.dir)?;
        let mut bytes = Vec::with_capacity(grads.len() * grads.first().map_or(0, Vec::len) * 4);
        for g in grads {
            for v in g {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = self.path(key);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn dataset_key(op: &AcousticOperator, samples: &[DatasetSample]) -> ContentHash {
    let mut h = ContentHash::new();
    h.text(&op.geometry().describe());
    for s in samples {
        h.f64s(s.y.data()).f64s(s.x_true.data());
    }
    h
}

fn mean_err(xs: &[Vec<f32>], targets: &[Vec<f32>]) -> Result<f64> {
    let errs: Vec<Result<f64>> = par::map_range(xs.len(), |i| {
        Ok(unbiased_rel_error_slice(&to_f64(&xs[i]), &to_f64(&targets[i]))?.err)
    });
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / xs.len() as f64)
}

fn roll_forward(arch: &DgdArchitecture, weights: &[f32], data: &StageData) -> Result<Vec<Vec<f32>>> {
    par::map_range(data.len(), |i| arch.apply(weights, &data.x[i], &data.g[i], &data.dims))
        .into_iter()
        .collect()
}

/// Greedy training: for each stage compute the data-fit gradients of all
/// samples (reusing `cache_dir` when given), train that stage alone, then
/// push every sample through it.
pub fn run_training_cycle(
    samples: &[DatasetSample],
    op: &AcousticOperator,
    stages: usize,
    hyper: &StageHyper,
    cache_dir: Option<&Path>,
) -> Result<DgdModel> {
    if stages == 0 {
        return Err(Error::invalid("need at least one stage"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let dims = op.geometry().dims().to_vec();
    let voxels: usize = dims.iter().product();
    let arch = DgdArchitecture::new(dims.len());
    let ys: Vec<&SensorData> = samples.iter().map(|s| &s.y).collect();
    let targets: Vec<Vec<f32>> = samples.iter().map(|s| to_f32(s.x_true.data())).collect();
    let mut xs: Vec<Vec<f32>> = samples.iter().map(|s| to_f32(s.x0.data())).collect();
    let cache = cache_dir.map(|d| GradientCache { dir: d.to_path_buf() });
    let mut key = dataset_key(op, samples);
    let mut log = TrainingLog {
        hyper: Some(hyper.clone()),
        staged_err: vec![mean_err(&xs, &targets)?],
        ..TrainingLog::default()
    };
    let mut model_stages = Vec::with_capacity(stages);
    for k in 0..stages {
        let stage_key = key.clone().text(&format!("stage {k}")).finish();
        let cached = cache.as_ref().and_then(|c| c.load(&stage_key, xs.len(), voxels));
        let g = match cached {
            Some(g) => g,
            None => {
                let g = data_fit_gradients(op, &xs, &ys)?;
                if let Some(c) = &cache {
                    c.store(&stage_key, &g)?;
                }
                g
            }
        };
        let data = StageData {
            dims: dims.clone(),
            x: xs,
            g,
            target: targets.clone(),
        };
        let stage_hyper = StageHyper {
            seed: hyper.seed.wrapping_add(k as u64),
            ..hyper.clone()
        };
        let result = train_stage(&arch, k, &data, &stage_hyper, None)?;
        xs = roll_forward(&arch, &result.weights, &data)?;
        log.staged_err.push(mean_err(&xs, &targets)?);
        log.stage_losses.push(result.losses);
        log.identity_loss.push(result.identity_loss);
        log.final_loss.push(result.final_loss);
        key.f32s(&result.weights);
        model_stages.push(result.weights);
    }
    Ok(DgdModel {
        ndim: dims.len(),
        kernel: arch.kernel(),
        stages: model_stages,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct DgdReconstruction {
    /// `x_0 .. x_K`.
    pub iterates: Vec<ScalarField>,
    pub seconds: f64,
}

impl DgdReconstruction {
    pub fn last(&self) -> &ScalarField {
        self.iterates.last().unwrap()
    }
}

/// `x_0 = A*y`, then `x_{k+1} = G_k(x_k, A*(A x_k - y))`; one adjoint plus
/// one forward/adjoint pair per stage.
pub fn reconstruct_dgd(op: &AcousticOperator, y: &SensorData, model: &DgdModel) -> Result<DgdReconstruction> {
    let dims = op.geometry().dims().to_vec();
    if dims.len() != model.ndim {
        return Err(Error::shape(format!(
            "model is {}-d, geometry {:?}",
            model.ndim, dims
        )));
    }
    let arch = model.architecture();
    let started = Instant::now();
    let x0 = op.adjoint(y)?;
    let mut iterates = vec![x0.clone()];
    let mut x = x0;
    for weights in &model.stages {
        let g = op.data_fit_gradient(&x, y)?;
        let out = arch.apply(weights, &to_f32(x.data()), &to_f32(g.data()), &dims)?;
        x = x.with_data(to_f64(&out));
        iterates.push(x.clone());
    }
    Ok(DgdReconstruction {
        iterates,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// A measurement and the image it should reconstruct to.
#[derive(Debug, Clone)]
pub struct TransferPair {
    pub y: SensorData,
    pub target: ScalarField,
}

/// Fine-tunes every stage in order on `pairs`, rolling the samples through
/// the already-updated earlier stages. One epoch is one pass over the
/// pairs in mini-batches.
pub fn transfer_update(
    model: &DgdModel,
    op: &AcousticOperator,
    pairs: &[TransferPair],
    lr: f64,
    epochs: usize,
    hyper: &StageHyper,
) -> Result<DgdModel> {
    if pairs.is_empty() {
        return Err(Error::invalid("transfer training needs at least one pair"));
    }
    let dims = op.geometry().dims().to_vec();
    let arch = model.architecture();
    let ys: Vec<&SensorData> = pairs.iter().map(|p| &p.y).collect();
    let targets: Vec<Vec<f32>> = pairs.iter().map(|p| to_f32(p.target.data())).collect();
    let x0: Vec<Result<Vec<f32>>> =
        par::map_slice(pairs, |_, p| Ok(to_f32(op.adjoint(&p.y)?.data())));
    let mut xs = x0.into_iter().collect::<Result<Vec<_>>>()?;
    let steps = epochs * pairs.len().div_ceil(hyper.batch.max(1));
    let mut updated = model.clone();
    updated.log = TrainingLog {
        transfer: Some((lr, epochs)),
        ..TrainingLog::default()
    };
    for (k, weights) in updated.stages.iter_mut().enumerate() {
        let g = data_fit_gradients(op, &xs, &ys)?;
        let data = StageData {
            dims: dims.clone(),
            x: xs,
            g,
            target: targets.clone(),
        };
        let stage_hyper = StageHyper {
            steps,
            lr,
            seed: hyper.seed.wrapping_add(k as u64),
            ..hyper.clone()
        };
        let result = train_stage(&arch, k, &data, &stage_hyper, Some(weights))?;
        *weights = result.weights;
        updated.log.stage_losses.push(result.losses);
        updated.log.identity_loss.push(result.identity_loss);
        updated.log.final_loss.push(result.final_loss);
        xs = roll_forward(&arch, weights, &data)?;
    }
    Ok(updated)
}

/// Optimizing all stages jointly would put the operator inside every
/// training step; that is out of reach here by orders of magnitude.
pub fn train_jointly(_samples: &[DatasetSample], _op: &AcousticOperator, _stages: usize) -> Result<DgdModel> {
    Err(Error::Unsupported(
        "joint training of all stages needs the operator inside every optimizer step; \
         use the greedy stage-wise cycle instead"
            .into(),
    ))
}
