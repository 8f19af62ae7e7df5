//! Comparative experiments at desk scale: error-versus-iteration curves,
//! per-method evaluation, operator-count timing, robustness probes and
//! domain transfer. Every CSV starts with a `# config_hash` comment line
//! followed by its header.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::acoustic::{estimate_lipschitz, AcousticOperator, SensorData};
use crate::config::{ExperimentConfig, TRANSFER_SEED_OFFSET, TRANSFER_TEST_SEED_OFFSET};
use crate::dgd::{reconstruct_dgd, transfer_update, DgdModel, TransferPair};
use crate::error::{Error, Result};
use crate::grids::{ScalarField, SeededRng};
use crate::io::{self, RawArray};
use crate::metrics::{unbiased_rel_error, EvalReport, SampleScore, EVAL_CSV_HEADER};
use crate::par;
use crate::phantom::{build_dataset, rescale_to_reference_std, DatasetOptions, DatasetSample, PhantomKind, PhantomSpec};
use crate::unet::{transfer_update_unet, UnetData, UnetModel};
use crate::variational::{proximal_gradient, Prior, SolverSettings};

pub const CONVERGENCE_POINTS: [usize; 6] = [1, 2, 5, 10, 20, 50];
pub const CONVERGENCE_CSV_HEADER: &str = "method,iteration,mean_err";
pub const LAMBDA_CSV_HEADER: &str = "lambda,mean_err";
pub const TIMING_CSV_HEADER: &str = "method,iterations,operator_applications,runs,mean_seconds";
pub const ROBUSTNESS_CSV_HEADER: &str = "perturbation,method,mean_err,baseline_err,deterioration";
pub const TRANSFER_CSV_HEADER: &str = "method,phase,mean_err,mean_psnr";

/// Power-iteration steps used for the step size `1/L`.
pub const LIPSCHITZ_ITERS: usize = 30;
const LIPSCHITZ_SEED: u64 = 0x5eed;
/// Added to the configured mask seed for the re-drawn sampling pattern.
pub const MASK_RESEED_OFFSET: u64 = 1000;

/// `# config_hash = ...`, the header, then the rows.
pub fn tagged_csv(config_hash: &str, header: &str, rows: &str) -> String {
    format!("# config_hash = {config_hash}\n{header}\n{rows}")
}

/// Drops the named columns (matched against the header line) from a tagged
/// CSV; used to compare runs without wall-clock fields.
pub fn drop_columns(csv: &str, names: &[&str]) -> String {
    let mut keep: Option<Vec<bool>> = None;
    let mut out = String::new();
    for line in csv.lines() {
        if line.starts_with('#') {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let mask = keep.get_or_insert_with(|| cells.iter().map(|c| !names.contains(c)).collect());
        let kept: Vec<&str> = cells
            .iter()
            .zip(mask.iter())
            .filter(|(_, &k)| k)
            .map(|(c, _)| *c)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Backprojection,
    Nnls,
    Tv,
    Dgd,
    Unet,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Backprojection, Method::Nnls, Method::Tv, Method::Dgd, Method::Unet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Backprojection => "x0",
            Method::Nnls => "nnls",
            Method::Tv => "tv",
            Method::Dgd => "dgd",
            Method::Unet => "unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

pub fn step_size(op: &AcousticOperator) -> Result<f64> {
    let l = estimate_lipschitz(op, LIPSCHITZ_ITERS, &mut SeededRng::new(LIPSCHITZ_SEED))?.value;
    if !(l > 0.0) {
        return Err(Error::Degenerate("operator has a zero Lipschitz estimate".into()));
    }
    Ok(1.0 / l)
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Iterates worth keeping: `x_0 .. x_K` for the learned scheme, `x_0`
    /// and the result otherwise.
    pub snapshots: Vec<ScalarField>,
    pub iterations: usize,
    pub seconds: f64,
}

impl Reconstruction {
    pub fn output(&self) -> &ScalarField {
        self.snapshots.last().unwrap()
    }
}

/// Everything needed to run any method on a measurement.
#[derive(Debug, Clone, Copy)]
pub struct Toolkit<'a> {
    pub op: &'a AcousticOperator,
    pub step: f64,
    pub tv_lambda: f64,
    pub tv_inner: usize,
    pub dgd: Option<&'a DgdModel>,
    pub unet: Option<&'a UnetModel>,
}

impl<'a> Toolkit<'a> {
    pub fn new(op: &'a AcousticOperator, step: f64, config: &ExperimentConfig) -> Self {
        Self {
            op,
            step,
            tv_lambda: config.tv.lambdas[0],
            tv_inner: config.tv.inner_iters,
            dgd: None,
            unet: None,
        }
    }

    pub fn with_models(mut self, dgd: Option<&'a DgdModel>, unet: Option<&'a UnetModel>) -> Self {
        self.dgd = dgd;
        self.unet = unet;
        self
    }

    pub fn with_op(mut self, op: &'a AcousticOperator) -> Self {
        self.op = op;
        self
    }

    fn dgd_model(&self) -> Result<&'a DgdModel> {
        self.dgd
            .ok_or_else(|| Error::invalid("no trained DGD model was provided"))
    }

    fn unet_model(&self) -> Result<&'a UnetModel> {
        self.unet
            .ok_or_else(|| Error::invalid("no trained U-Net model was provided"))
    }

    fn prior(&self, method: Method) -> Prior {
        match method {
            Method::Tv => Prior::TotalVariation {
                inner_iters: self.tv_inner,
            },
            _ => Prior::NonNegative,
        }
    }

    /// Variational solve from `x_0 = A*y`, with the error trace when the
    /// ground truth is given.
    pub fn variational(
        &self,
        method: Method,
        y: &SensorData,
        iterations: usize,
        x_true: Option<&ScalarField>,
    ) -> Result<(Reconstruction, Vec<f64>)> {
        let started = Instant::now();
        let x0 = self.op.adjoint(y)?;
        let settings = SolverSettings {
            lambda: if method == Method::Tv { self.tv_lambda } else { 0.0 },
            step: self.step,
            iterations,
            record_objective: false,
        };
        let (x, trace) = proximal_gradient(self.op, y, self.prior(method), &settings, &x0, x_true)?;
        Ok((
            Reconstruction {
                snapshots: vec![x0, x],
                iterations,
                seconds: started.elapsed().as_secs_f64(),
            },
            trace.err,
        ))
    }

    /// Runs `method`; `iterations` applies to the variational methods and
    /// caps the number of learned stages used.
    pub fn reconstruct(&self, method: Method, y: &SensorData, iterations: usize) -> Result<Reconstruction> {
        match method {
            Method::Backprojection => {
                let started = Instant::now();
                let x0 = self.op.adjoint(y)?;
                Ok(Reconstruction {
                    snapshots: vec![x0],
                    iterations: 0,
                    seconds: started.elapsed().as_secs_f64(),
                })
            }
            Method::Nnls | Method::Tv => Ok(self.variational(method, y, iterations, None)?.0),
            Method::Dgd => {
                let model = self.dgd_model()?;
                let k = iterations.min(model.stage_count());
                let truncated;
                let used = if k == model.stage_count() {
                    model
                } else {
                    truncated = DgdModel {
                        stages: model.stages[..k].to_vec(),
                        ..model.clone()
                    };
                    &truncated
                };
                let r = reconstruct_dgd(self.op, y, used)?;
                Ok(Reconstruction {
                    snapshots: r.iterates,
                    iterations: k,
                    seconds: r.seconds,
                })
            }
            Method::Unet => {
                let r = self.unet_model()?.reconstruct(self.op, y)?;
                Ok(Reconstruction {
                    snapshots: vec![r.x0, r.output],
                    iterations: 1,
                    seconds: r.seconds,
                })
            }
        }
    }

    /// Iteration count each method is evaluated at by default.
    pub fn default_iterations(&self, method: Method, config: &ExperimentConfig) -> usize {
        match method {
            Method::Backprojection => 0,
            Method::Nnls | Method::Tv => config.tv.iterations,
            Method::Dgd => self.dgd.map_or(config.dgd.k_max, |m| m.stage_count()),
            Method::Unet => 1,
        }
    }

    /// Scores `method` on every sample (parallel over samples).
    pub fn evaluate(&self, method: Method, samples: &[DatasetSample], iterations: usize) -> Result<EvalReport> {
        let scores = par::map_slice(samples, |i, s| -> Result<SampleScore> {
            let r = self.reconstruct(method, &s.y, iterations)?;
            SampleScore::evaluate(i, r.output(), &s.x_true, r.iterations, r.seconds)
        });
        let mut report = EvalReport::new(method.name());
        for s in scores {
            report.samples.push(s?);
        }
        Ok(report)
    }

    fn mean_err(&self, method: Method, samples: &[DatasetSample], iterations: usize) -> Result<f64> {
        let errs = par::map_slice(samples, |_, s| -> Result<f64> {
            let r = self.reconstruct(method, &s.y, iterations)?;
            Ok(unbiased_rel_error(r.output(), &s.x_true)?.err)
        });
        let mut total = 0.0;
        for e in errs {
            total += e?;
        }
        Ok(total / samples.len() as f64)
    }
}

fn nonempty(samples: &[DatasetSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("experiment needs at least one sample"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSweep {
    /// `(lambda, mean err)` in grid order.
    pub points: Vec<(f64, f64)>,
    pub best: f64,
}

impl LambdaSweep {
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (l, e) in &self.points {
            let _ = writeln!(out, "{l:e},{e:.10e}");
        }
        out
    }
}

/// Mean TV error after `iterations` steps for every `lambda`; the first
/// minimum wins ties.
pub fn sweep_tv_lambda(
    toolkit: &Toolkit,
    samples: &[DatasetSample],
    lambdas: &[f64],
    iterations: usize,
) -> Result<LambdaSweep> {
    nonempty(samples)?;
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let tk = Toolkit {
            tv_lambda: lambda,
            ..*toolkit
        };
        points.push((lambda, tk.mean_err(Method::Tv, samples, iterations)?));
    }
    let best = points
        .iter()
        .fold((f64::NAN, f64::INFINITY), |acc, &(l, e)| if e < acc.1 { (l, e) } else { acc })
        .0;
    Ok(LambdaSweep { points, best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    /// `(method, iteration, mean err)`.
    pub rows: Vec<(String, usize, f64)>,
}

impl ConvergenceTable {
    pub fn mean_err(&self, method: &str, iteration: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|(m, k, _)| m == method && *k == iteration)
            .map(|r| r.2)
    }

    pub fn curve(&self, method: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|(m, _, _)| m == method)
            .map(|(_, k, e)| (*k, *e))
            .collect()
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (m, k, e) in &self.rows {
            let _ = writeln!(out, "{m},{k},{e:.10e}");
        }
        out
    }
}

/// Mean error against iteration: `x_0` once, NNLS and TV at
/// [`CONVERGENCE_POINTS`], each learned stage, and the U-Net's single step.
pub fn convergence_experiment(toolkit: &Toolkit, samples: &[DatasetSample]) -> Result<ConvergenceTable> {
    nonempty(samples)?;
    let dgd = toolkit.dgd_model()?;
    toolkit.unet_model()?;
    let n = samples.len() as f64;
    let last = *CONVERGENCE_POINTS.last().unwrap();
    let mut rows = Vec::new();
    rows.push((
        Method::Backprojection.name().to_string(),
        0,
        toolkit.mean_err(Method::Backprojection, samples, 0)?,
    ));
    for method in [Method::Nnls, Method::Tv] {
        let traces = par::map_slice(samples, |_, s| {
            toolkit
                .variational(method, &s.y, last, Some(&s.x_true))
                .map(|(_, errs)| errs)
        });
        let mut sums = vec![0.0; CONVERGENCE_POINTS.len()];
        for t in traces {
            let t = t?;
            for (sum, &k) in sums.iter_mut().zip(&CONVERGENCE_POINTS) {
                *sum += t[k - 1];
            }
        }
        for (sum, &k) in sums.iter().zip(&CONVERGENCE_POINTS) {
            rows.push((method.name().to_string(), k, sum / n));
        }
    }
    let iterates = par::map_slice(samples, |_, s| -> Result<Vec<f64>> {
        let r = reconstruct_dgd(toolkit.op, &s.y, dgd)?;
        r.iterates[1..]
            .iter()
            .map(|x| Ok(unbiased_rel_error(x, &s.x_true)?.err))
            .collect()
    });
    let mut sums = vec![0.0; dgd.stage_count()];
    for errs in iterates {
        for (sum, e) in sums.iter_mut().zip(errs?) {
            *sum += e;
        }
    }
    for (k, sum) in sums.iter().enumerate() {
        rows.push((Method::Dgd.name().to_string(), k + 1, sum / n));
    }
    rows.push((
        Method::Unet.name().to_string(),
        1,
        toolkit.mean_err(Method::Unet, samples, 1)?,
    ));
    Ok(ConvergenceTable { rows })
}

/// Mean err per method on one sample set.
pub fn evaluate_methods(
    toolkit: &Toolkit,
    samples: &[DatasetSample],
    methods: &[Method],
    config: &ExperimentConfig,
) -> Result<Vec<EvalReport>> {
    nonempty(samples)?;
    methods
        .iter()
        .map(|&m| toolkit.evaluate(m, samples, toolkit.default_iterations(m, config)))
        .collect()
}

pub fn eval_csv(config_hash: &str, reports: &[EvalReport]) -> String {
    let rows: String = reports.iter().map(|r| r.csv_rows()).collect();
    tagged_csv(config_hash, EVAL_CSV_HEADER, &rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: String,
    pub iterations: usize,
    pub operator_applications: usize,
    pub runs: usize,
    pub mean_seconds: f64,
}

/// Wall time per reconstruction (including `x_0 = A*y`) over the first
/// `runs` samples, one sample at a time. Operator applications are counted
/// per reconstruction and must agree across runs.
pub fn timing_experiment(
    toolkit: &Toolkit,
    samples: &[DatasetSample],
    runs: usize,
    iterations: usize,
) -> Result<Vec<TimingRow>> {
    nonempty(samples)?;
    if runs == 0 {
        return Err(Error::invalid("timing needs at least one run"));
    }
    let dgd_iters = toolkit.dgd_model()?.stage_count();
    toolkit.unet_model()?;
    let mut rows = Vec::new();
    for method in [Method::Unet, Method::Dgd, Method::Tv, Method::Nnls] {
        let iters = match method {
            Method::Unet => 1,
            Method::Dgd => dgd_iters.min(iterations),
            _ => iterations,
        };
        let mut counts = Vec::with_capacity(runs);
        let mut total = 0.0;
        for r in 0..runs {
            let s = &samples[r % samples.len()];
            toolkit.op.reset_applications();
            let started = Instant::now();
            toolkit.reconstruct(method, &s.y, iters)?;
            total += started.elapsed().as_secs_f64();
            counts.push(toolkit.op.applications());
        }
        if counts.iter().any(|&c| c != counts[0]) {
            return Err(Error::Degenerate(format!(
                "{} used a varying number of operator applications: {counts:?}",
                method.name()
            )));
        }
        rows.push(TimingRow {
            method: method.name().to_string(),
            iterations: iters,
            operator_applications: counts[0],
            runs,
            mean_seconds: total / runs as f64,
        });
    }
    Ok(rows)
}

pub fn timing_csv(config_hash: &str, rows: &[TimingRow]) -> String {
    let mut body = String::new();
    for r in rows {
        let _ = writeln!(
            body,
            "{},{},{},{},{:.6}",
            r.method, r.iterations, r.operator_applications, r.runs, r.mean_seconds
        );
    }
    tagged_csv(config_hash, TIMING_CSV_HEADER, &body)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub perturbation: String,
    pub method: String,
    pub mean_err: f64,
    pub baseline_err: f64,
}

impl RobustnessRow {
    /// Relative change of the mean error against the unperturbed set.
    pub fn deterioration(&self) -> f64 {
        (self.mean_err - self.baseline_err) / self.baseline_err
    }
}

pub fn robustness_csv(config_hash: &str, rows: &[RobustnessRow]) -> String {
    let mut body = String::new();
    for r in rows {
        let _ = writeln!(
            body,
            "{},{},{:.10e},{:.10e},{:.10e}",
            r.perturbation,
            r.method,
            r.mean_err,
            r.baseline_err,
            r.deterioration()
        );
    }
    tagged_csv(config_hash, ROBUSTNESS_CSV_HEADER, &body)
}

/// A perturbed copy of the test domain: the data are simulated with
/// `data_op`, the reconstruction sees `recon_op`.
struct Perturbation {
    name: &'static str,
    data_op: AcousticOperator,
    recon_op: AcousticOperator,
    spec: PhantomSpec,
    options: DatasetOptions,
}

/// Error of `x_0`, the learned scheme and the post-processing network
/// under sampling, sound-speed, noise and phantom shifts. The unperturbed
/// row regenerates the test set and so reports zero deterioration.
pub fn robustness_experiment(config: &ExperimentConfig, toolkit: &Toolkit) -> Result<Vec<RobustnessRow>> {
    toolkit.dgd_model()?;
    toolkit.unet_model()?;
    let n = config.data.n_test;
    let base_options = config.test_options();
    let spec = config.phantom_spec();
    let nominal = || config.operator();
    let reseeded = || config.operator_with_mask_seed(config.geometry.mask_seed.wrapping_add(MASK_RESEED_OFFSET));
    let shifted_speed = |factor: f64| -> Result<AcousticOperator> {
        let op = config.operator()?;
        let geometry = op
            .geometry()
            .clone()
            .with_sound_speed(config.geometry.sound_speed * factor)?;
        Ok(AcousticOperator::new(geometry))
    };
    let with_snr = |snr: f64| DatasetOptions {
        snr,
        ..base_options.clone()
    };
    let ds = config.bench.sound_speed_shift;
    let dn = config.bench.noise_shift;
    let perturbations = vec![
        Perturbation {
            name: "none",
            data_op: nominal()?,
            recon_op: nominal()?,
            spec: spec.clone(),
            options: base_options.clone(),
        },
        Perturbation {
            name: "mask_reseed",
            data_op: reseeded()?,
            recon_op: reseeded()?,
            spec: spec.clone(),
            options: base_options.clone(),
        },
        Perturbation {
            name: "sound_speed_plus",
            data_op: shifted_speed(1.0 + ds)?,
            recon_op: nominal()?,
            spec: spec.clone(),
            options: base_options.clone(),
        },
        Perturbation {
            name: "sound_speed_minus",
            data_op: shifted_speed(1.0 - ds)?,
            recon_op: nominal()?,
            spec: spec.clone(),
            options: base_options.clone(),
        },
        Perturbation {
            name: "noise_plus",
            data_op: nominal()?,
            recon_op: nominal()?,
            spec: spec.clone(),
            options: with_snr(config.data.snr / (1.0 + dn)),
        },
        Perturbation {
            name: "noise_minus",
            data_op: nominal()?,
            recon_op: nominal()?,
            spec: spec.clone(),
            options: with_snr(config.data.snr / (1.0 - dn)),
        },
        Perturbation {
            name: "tumor",
            data_op: nominal()?,
            recon_op: nominal()?,
            spec: PhantomSpec::for_kind(PhantomKind::Tumor, 0),
            options: base_options.clone(),
        },
    ];
    let methods = [Method::Backprojection, Method::Dgd, Method::Unet];
    let baseline_set = build_dataset(n, &spec, toolkit.op, &base_options)?;
    let mut baseline = Vec::new();
    for m in methods {
        baseline.push(toolkit.mean_err(m, &baseline_set, toolkit.default_iterations(m, config))?);
    }
    let mut rows = Vec::new();
    for p in &perturbations {
        let set = build_dataset(n, &p.spec, &p.data_op, &p.options)?;
        let tk = toolkit.with_op(&p.recon_op);
        for (m, &base) in methods.iter().zip(&baseline) {
            rows.push(RobustnessRow {
                perturbation: p.name.to_string(),
                method: m.name().to_string(),
                mean_err: tk.mean_err(*m, &set, tk.default_iterations(*m, config))?,
                baseline_err: base,
            });
        }
    }
    Ok(rows)
}

/// Pairs from the shifted domain: sub-sampled measurement and the image
/// reconstructed from full-aperture data, which stands in for the
/// unavailable ground truth.
#[derive(Debug, Clone)]
pub struct ShiftedDomain {
    pub pairs: Vec<TransferPair>,
    pub test: Vec<TransferPair>,
}

fn shifted_pairs(
    config: &ExperimentConfig,
    sub_op: &AcousticOperator,
    full_op: &AcousticOperator,
    full_step: f64,
    n: usize,
    seed: u64,
    reference_std: Option<f64>,
) -> Result<Vec<TransferPair>> {
    let spec = config.phantom_spec();
    let options = config.dataset_options(seed, true);
    let sub = build_dataset(n, &spec, sub_op, &options)?;
    let full = build_dataset(n, &spec, full_op, &options)?;
    let reference = Toolkit {
        op: full_op,
        step: full_step,
        tv_lambda: config.transfer.reference_lambda,
        tv_inner: config.tv.inner_iters,
        dgd: None,
        unet: None,
    };
    let targets = par::map_slice(&full, |_, s| {
        reference
            .reconstruct(Method::Tv, &s.y, config.transfer.reference_iterations)
            .map(|r| r.output().clone())
    });
    sub.into_iter()
        .zip(targets)
        .map(|(s, target)| {
            let y = match reference_std {
                Some(std) => rescale_to_reference_std(&s.y, std)?,
                None => s.y,
            };
            Ok(TransferPair { y, target: target? })
        })
        .collect()
}

/// Background-augmented domain with full-aperture TV references. With
/// `reference_std`, every measurement is rescaled to that standard
/// deviation first.
pub fn shifted_domain(
    config: &ExperimentConfig,
    sub_op: &AcousticOperator,
    reference_std: Option<f64>,
) -> Result<ShiftedDomain> {
    let full_op = config.full_operator()?;
    let full_step = step_size(&full_op)?;
    let base = config.data.seed;
    Ok(ShiftedDomain {
        pairs: shifted_pairs(
            config,
            sub_op,
            &full_op,
            full_step,
            config.transfer.n_pairs,
            base.wrapping_add(TRANSFER_SEED_OFFSET),
            reference_std,
        )?,
        test: shifted_pairs(
            config,
            sub_op,
            &full_op,
            full_step,
            config.transfer.n_test,
            base.wrapping_add(TRANSFER_TEST_SEED_OFFSET),
            reference_std,
        )?,
    })
}

/// Mean standard deviation of the training measurements.
pub fn mean_measurement_std(samples: &[DatasetSample]) -> Result<f64> {
    nonempty(samples)?;
    Ok(samples.iter().map(|s| s.y.std()).sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub rows: Vec<(String, String, f64, f64)>,
    pub dgd: DgdModel,
    pub unet: UnetModel,
}

impl TransferOutcome {
    pub fn mean_err(&self, method: &str, phase: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.0 == method && r.1 == phase)
            .map(|r| r.2)
    }

    pub fn csv(&self, config_hash: &str) -> String {
        let mut body = String::new();
        for (m, p, e, psnr) in &self.rows {
            let _ = writeln!(body, "{m},{p},{e:.10e},{psnr:.10e}");
        }
        tagged_csv(config_hash, TRANSFER_CSV_HEADER, &body)
    }
}

fn transfer_scores(
    toolkit: &Toolkit,
    method: Method,
    test: &[TransferPair],
    iterations: usize,
) -> Result<(f64, f64)> {
    let scores = par::map_slice(test, |_, p| -> Result<(f64, f64)> {
        let r = toolkit.reconstruct(method, &p.y, iterations)?;
        Ok((
            unbiased_rel_error(r.output(), &p.target)?.err,
            crate::metrics::psnr(r.output(), &p.target, 1.0)?,
        ))
    });
    let (mut e, mut q) = (0.0, 0.0);
    for s in scores {
        let (a, b) = s?;
        e += a;
        q += b;
    }
    Ok((e / test.len() as f64, q / test.len() as f64))
}

/// Scores both networks on the shifted test pairs, fine-tunes them on the
/// shifted training pairs, and scores them again.
pub fn transfer_experiment(
    config: &ExperimentConfig,
    toolkit: &Toolkit,
    domain: &ShiftedDomain,
) -> Result<TransferOutcome> {
    let dgd = toolkit.dgd_model()?;
    let unet = toolkit.unet_model()?;
    if domain.pairs.is_empty() || domain.test.is_empty() {
        return Err(Error::invalid("transfer needs training and test pairs"));
    }
    let lr = config.transfer.lr;
    let epochs = config.transfer.epochs;
    let dgd_after = transfer_update(dgd, toolkit.op, &domain.pairs, lr, epochs, &config.stage_hyper())?;
    let unet_pairs: Vec<(ScalarField, ScalarField)> = domain
        .pairs
        .iter()
        .map(|p| Ok((toolkit.op.adjoint(&p.y)?, p.target.clone())))
        .collect::<Result<_>>()?;
    let unet_after = transfer_update_unet(
        unet,
        &UnetData::from_fields(&unet_pairs)?,
        lr,
        epochs,
        &config.unet_hyper(),
    )?;
    let k = dgd.stage_count();
    let mut rows = Vec::new();
    let mut push = |method: Method, phase: &str, tk: &Toolkit, iters: usize| -> Result<()> {
        let (e, p) = transfer_scores(tk, method, &domain.test, iters)?;
        rows.push((method.name().to_string(), phase.to_string(), e, p));
        Ok(())
    };
    push(Method::Backprojection, "before", toolkit, 0)?;
    push(Method::Dgd, "before", toolkit, k)?;
    push(Method::Unet, "before", toolkit, 1)?;
    let updated = toolkit.with_models(Some(&dgd_after), Some(&unet_after));
    push(Method::Dgd, "after", &updated, k)?;
    push(Method::Unet, "after", &updated, 1)?;
    Ok(TransferOutcome {
        rows,
        dgd: dgd_after,
        unet: unet_after,
    })
}

/// One PGM per reconstruction of `sample`, displayed on `[0, max(x_true)]`.
pub fn write_figures(dir: &Path, toolkit: &Toolkit, sample: &DatasetSample, config: &ExperimentConfig) -> Result<()> {
    io::create_dir(dir)?;
    let display_max = sample.x_true.max();
    io::write_pgm(&dir.join("x_true.pgm"), &sample.x_true, display_max)?;
    for method in Method::ALL {
        let usable = match method {
            Method::Dgd => toolkit.dgd.is_some(),
            Method::Unet => toolkit.unet.is_some(),
            _ => true,
        };
        if usable {
            let r = toolkit.reconstruct(method, &sample.y, toolkit.default_iterations(method, config))?;
            io::write_pgm(&dir.join(format!("{}.pgm", method.name())), r.output(), display_max)?;
        }
    }
    Ok(())
}

pub fn save_sample(dir: &Path, sample: &DatasetSample) -> Result<()> {
    io::create_dir(dir)?;
    io::write_field(&dir.join("x_true"), &sample.x_true)?;
    io::write_field(&dir.join("x0"), &sample.x0)?;
    io::write_raw(
        &dir.join("y"),
        &RawArray {
            dims: vec![sample.y.n_sensors(), sample.y.n_t()],
            data: sample.y.data().to_vec(),
            extras: vec![("dt".into(), format!("{:e}", sample.y.dt()))],
        },
    )
}

pub fn load_sample(dir: &Path) -> Result<DatasetSample> {
    let raw = io::read_raw(&dir.join("y"))?;
    let hdr = dir.join("y.hdr");
    if raw.dims.len() != 2 {
        return Err(Error::format(&hdr, "measurements must be sensors x time"));
    }
    let dt: f64 = raw
        .extra("dt")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(&hdr, "missing or bad dt"))?;
    Ok(DatasetSample {
        x_true: io::read_field(&dir.join("x_true"))?,
        x0: io::read_field(&dir.join("x0"))?,
        y: SensorData::new(raw.dims[0], raw.dims[1], dt, raw.data)?,
    })
}

/// `dir/sample_000`, `dir/sample_001`, ...
pub fn save_dataset(dir: &Path, samples: &[DatasetSample]) -> Result<()> {
    io::create_dir(dir)?;
    for (i, s) in samples.iter().enumerate() {
        save_sample(&dir.join(format!("sample_{i:03}")), s)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetSample>> {
    let mut samples = Vec::new();
    loop {
        let sample_dir = dir.join(format!("sample_{:03}", samples.len()));
        if !sample_dir.is_dir() {
            break;
        }
        samples.push(load_sample(&sample_dir)?);
    }
    if samples.is_empty() {
        return Err(Error::format(dir, "no sample_000 directory found"));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgd::StageHyper;
    use crate::unet::{train_unet, UnetHyper};

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            "geometry.dims = 32, 32\ngeometry.n_t = 64\ndata.n_train = 4\ndata.n_test = 2\n\
             dgd.k_max = 2\ndgd.steps_per_stage = 2\nunet.epochs = 1\ntransfer.n_pairs = 2\n\
             transfer.n_test = 2\ntransfer.epochs = 1\ntransfer.reference_iterations = 3\n\
             bench.timing_runs = 2\ntv.lambdas = 1e-3, 1e-2",
        )
        .unwrap()
    }

    struct Fixture {
        config: ExperimentConfig,
        op: AcousticOperator,
        step: f64,
        test: Vec<DatasetSample>,
        dgd: DgdModel,
        unet: UnetModel,
    }

    fn fixture() -> Fixture {
        let config = small_config();
        let op = config.operator().unwrap();
        let step = step_size(&op).unwrap();
        let spec = config.phantom_spec();
        let train = build_dataset(config.data.n_train, &spec, &op, &config.train_options()).unwrap();
        let test = build_dataset(config.data.n_test, &spec, &op, &config.test_options()).unwrap();
        let dgd = crate::dgd::run_training_cycle(
            &train,
            &op,
            config.dgd.k_max,
            &StageHyper {
                steps: 2,
                ..config.stage_hyper()
            },
            None,
        )
        .unwrap();
        let pairs: Vec<_> = train.iter().map(|s| (s.x0.clone(), s.x_true.clone())).collect();
        let unet = train_unet(
            &UnetData::from_fields(&pairs).unwrap(),
            &UnetHyper {
                epochs: 1,
                ..config.unet_hyper()
            },
        )
        .unwrap();
        Fixture {
            config,
            op,
            step,
            test,
            dgd,
            unet,
        }
    }

    #[test]
    fn csv_helpers() {
        let csv = tagged_csv("abc", "a,seconds,b", "1,2.5,3\n4,5.5,6\n");
        assert_eq!(csv, "# config_hash = abc\na,seconds,b\n1,2.5,3\n4,5.5,6\n");
        assert_eq!(drop_columns(&csv, &["seconds"]), "# config_hash = abc\na,b\n1,3\n4,6\n");
    }

    #[test]
    fn experiment_tables_have_the_documented_shape() {
        let f = fixture();
        let tk = Toolkit::new(&f.op, f.step, &f.config).with_models(Some(&f.dgd), Some(&f.unet));
        let table = convergence_experiment(&tk, &f.test).unwrap();
        assert_eq!(table.rows.len(), 1 + 2 * CONVERGENCE_POINTS.len() + f.dgd.stage_count() + 1);
        let nnls = table.curve("nnls");
        assert_eq!(nnls.len(), CONVERGENCE_POINTS.len());

        let rows = timing_experiment(&tk, &f.test, 2, 2).unwrap();
        let count = |m: &str| rows.iter().find(|r| r.method == m).unwrap().operator_applications;
        assert_eq!(count("unet"), 1);
        assert_eq!(count("dgd"), 5);
        assert_eq!(count("tv"), 5);
        assert_eq!(count("nnls"), 5);
        let csv = timing_csv("h", &rows);
        assert_eq!(csv.lines().count(), 2 + 4);

        let reports = evaluate_methods(&tk, &f.test, &Method::ALL, &f.config).unwrap();
        let csv = eval_csv("h", &reports);
        assert_eq!(csv.lines().count(), 2 + Method::ALL.len() * f.test.len());

        let without_models = Toolkit::new(&f.op, f.step, &f.config);
        assert!(convergence_experiment(&without_models, &f.test).is_err());
    }

    #[test]
    fn unperturbed_robustness_row_is_exactly_zero() {
        let f = fixture();
        let tk = Toolkit::new(&f.op, f.step, &f.config).with_models(Some(&f.dgd), Some(&f.unet));
        let rows = robustness_experiment(&f.config, &tk).unwrap();
        assert_eq!(rows.len(), 7 * 3);
        for r in rows.iter().filter(|r| r.perturbation == "none") {
            assert_eq!(r.deterioration(), 0.0, "{r:?}");
        }
        assert!(rows.iter().filter(|r| r.perturbation == "mask_reseed").all(|r| r.deterioration() != 0.0));
    }

    #[test]
    fn transfer_produces_before_and_after_rows() {
        let f = fixture();
        let tk = Toolkit::new(&f.op, f.step, &f.config).with_models(Some(&f.dgd), Some(&f.unet));
        let domain = shifted_domain(&f.config, &f.op, None).unwrap();
        assert_eq!(domain.pairs.len(), 2);
        let out = transfer_experiment(&f.config, &tk, &domain).unwrap();
        assert_eq!(out.rows.len(), 5);
        assert!(out.mean_err("dgd", "after").is_some());
        assert_eq!(out.dgd.log.transfer, Some((1e-5, 1)));
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let config = small_config();
        let op = config.operator().unwrap();
        let set = build_dataset(2, &config.phantom_spec(), &op, &config.train_options()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &set).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), set);
        assert!(load_dataset(&dir.path().join("missing")).is_err());
    }
}
