//! Experiment configuration: `key = value` lines with dotted section
//! prefixes, `#` comments, strict validation and a canonical serialization
//! whose hash identifies every artifact built from it.

use std::fmt::Write as _;
use std::path::Path;

use crate::acoustic::{
    default_dt, default_padding, make_subsampling_mask, AcousticGeometry, AcousticOperator, SOUND_SPEED,
    VOXEL_SIZE,
};
use crate::dgd::{self, StageHyper};
use crate::error::{Error, Result};
use crate::grids::SeededRng;
use crate::io::sha256_hex;
use crate::nn::loss::{NORM_PENALTY_FRACTION, NORM_PENALTY_WEIGHT};
use crate::phantom::{DatasetOptions, PhantomKind, PhantomSpec};
use crate::unet::{UnetHyper, DEFAULT_UNET_EPOCHS, DEFAULT_UNET_LR};
use crate::variational::{default_lambda_grid, DEFAULT_TV_INNER_ITERS};

/// Offset between the training seed and the held-out test seed; sample `i`
/// uses `seed + i`, so the two sets never share a stream.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;
pub const TRANSFER_SEED_OFFSET: u64 = 2_000_003;
pub const TRANSFER_TEST_SEED_OFFSET: u64 = 3_000_003;

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    pub dims: Vec<usize>,
    pub dx: f64,
    pub sound_speed: f64,
    pub n_t: usize,
    /// `None` derives the step from the grid diagonal.
    pub dt: Option<f64>,
    pub sensor_pitch: usize,
    pub subsample_factor: usize,
    pub mask_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub snr: f64,
    pub background: bool,
    pub background_sigma: f64,
    pub phantom: PhantomKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgdConfig {
    pub k_max: usize,
    pub steps_per_stage: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss_add_alpha: f64,
    pub loss_add_beta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnetConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvConfig {
    pub lambdas: Vec<f64>,
    pub inner_iters: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub lr: f64,
    pub epochs: usize,
    pub n_pairs: usize,
    pub n_test: usize,
    /// Full-aperture TV settings used to build the reference images.
    pub reference_lambda: f64,
    pub reference_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub timing_runs: usize,
    pub sound_speed_shift: f64,
    pub noise_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    /// Directory for cached stage gradients; empty disables the cache.
    pub cache: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub data: DataConfig,
    pub dgd: DgdConfig,
    pub unet: UnetConfig,
    pub tv: TvConfig,
    pub transfer: TransferConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig {
                dims: vec![64, 64],
                dx: VOXEL_SIZE,
                sound_speed: SOUND_SPEED,
                n_t: 128,
                dt: None,
                sensor_pitch: 2,
                subsample_factor: 4,
                mask_seed: 7,
            },
            data: DataConfig {
                n_train: 64,
                n_test: 16,
                snr: 15.0,
                background: false,
                background_sigma: 2.0,
                phantom: PhantomKind::Vessels,
                seed: 1,
            },
            dgd: DgdConfig {
                k_max: dgd::DEFAULT_STAGES,
                steps_per_stage: 2000,
                batch: dgd::DEFAULT_BATCH,
                lr: dgd::DEFAULT_LR,
                loss_add_alpha: NORM_PENALTY_WEIGHT,
                loss_add_beta: NORM_PENALTY_FRACTION,
                seed: 11,
            },
            unet: UnetConfig {
                epochs: DEFAULT_UNET_EPOCHS,
                batch: dgd::DEFAULT_BATCH,
                lr: DEFAULT_UNET_LR,
                seed: 13,
            },
            tv: TvConfig {
                lambdas: default_lambda_grid(),
                inner_iters: DEFAULT_TV_INNER_ITERS,
                iterations: 20,
            },
            transfer: TransferConfig {
                lr: dgd::DEFAULT_TRANSFER_LR,
                epochs: dgd::DEFAULT_TRANSFER_EPOCHS,
                n_pairs: 128,
                n_test: 32,
                reference_lambda: 1e-3,
                reference_iterations: 50,
            },
            bench: BenchConfig {
                timing_runs: 5,
                sound_speed_shift: 0.01,
                noise_shift: 0.2,
            },
            paths: PathsConfig { cache: String::new() },
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        message: format!("malformed value {value:?} for {key}"),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|part| parse_value(key, part.trim(), line))
        .collect()
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config {
            line,
            message: format!("malformed value {value:?} for {key}; expected true or false"),
        }),
    }
}

fn range_error(key: &str, requirement: &str, line: usize) -> Error {
    Error::Config {
        line,
        message: format!("{key} out of range: must be {requirement}"),
    }
}

fn positive_f64(key: &str, value: &str, line: usize) -> Result<f64> {
    let v: f64 = parse_value(key, value, line)?;
    if !(v.is_finite() && v > 0.0) {
        return Err(range_error(key, "a positive finite number", line));
    }
    Ok(v)
}

fn nonneg_f64(key: &str, value: &str, line: usize) -> Result<f64> {
    let v: f64 = parse_value(key, value, line)?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(range_error(key, "a finite number >= 0", line));
    }
    Ok(v)
}

fn positive_usize(key: &str, value: &str, line: usize) -> Result<usize> {
    let v: usize = parse_value(key, value, line)?;
    if v == 0 {
        return Err(range_error(key, "at least 1", line));
    }
    Ok(v)
}

fn fmt_list<T: std::fmt::Debug>(items: &[T]) -> String {
    items.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            config.set(key.trim(), value.trim(), line)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` assignment; `line` is reported on error.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let g = &mut self.geometry;
        let d = &mut self.data;
        match key {
            "geometry.dims" => {
                let dims: Vec<usize> = parse_list(key, value, line)?;
                if !(2..=3).contains(&dims.len()) || dims.iter().any(|&n| n < 12 || n % 4 != 0) {
                    return Err(range_error(key, "2 or 3 extents, each >= 12 and divisible by 4", line));
                }
                g.dims = dims;
            }
            "geometry.dx" => g.dx = positive_f64(key, value, line)?,
            "geometry.sound_speed" => g.sound_speed = positive_f64(key, value, line)?,
            "geometry.n_t" => g.n_t = positive_usize(key, value, line)?,
            "geometry.dt" => {
                g.dt = if value == "auto" {
                    None
                } else {
                    Some(positive_f64(key, value, line)?)
                }
            }
            "geometry.sensor_pitch" => g.sensor_pitch = positive_usize(key, value, line)?,
            "geometry.subsample_factor" => g.subsample_factor = positive_usize(key, value, line)?,
            "geometry.mask_seed" => g.mask_seed = parse_value(key, value, line)?,
            "data.n_train" => d.n_train = positive_usize(key, value, line)?,
            "data.n_test" => d.n_test = positive_usize(key, value, line)?,
            "data.snr" => d.snr = positive_f64(key, value, line)?,
            "data.background" => d.background = parse_bool(key, value, line)?,
            "data.background_sigma" => d.background_sigma = positive_f64(key, value, line)?,
            "data.phantom" => {
                d.phantom = PhantomKind::parse(value).ok_or_else(|| Error::Config {
                    line,
                    message: format!("unknown phantom kind {value:?} for {key}"),
                })?
            }
            "data.seed" => d.seed = parse_value(key, value, line)?,
            "dgd.k_max" => self.dgd.k_max = positive_usize(key, value, line)?,
            "dgd.steps_per_stage" => self.dgd.steps_per_stage = positive_usize(key, value, line)?,
            "dgd.batch" => self.dgd.batch = positive_usize(key, value, line)?,
            "dgd.lr" => self.dgd.lr = positive_f64(key, value, line)?,
            "dgd.loss_add_alpha" => self.dgd.loss_add_alpha = nonneg_f64(key, value, line)?,
            "dgd.loss_add_beta" => self.dgd.loss_add_beta = nonneg_f64(key, value, line)?,
            "dgd.seed" => self.dgd.seed = parse_value(key, value, line)?,
            "unet.epochs" => self.unet.epochs = positive_usize(key, value, line)?,
            "unet.batch" => self.unet.batch = positive_usize(key, value, line)?,
            "unet.lr" => self.unet.lr = positive_f64(key, value, line)?,
            "unet.seed" => self.unet.seed = parse_value(key, value, line)?,
            "tv.lambdas" => {
                let lambdas: Vec<f64> = parse_list(key, value, line)?;
                if lambdas.is_empty() || lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
                    return Err(range_error(key, "a nonempty list of positive numbers", line));
                }
                self.tv.lambdas = lambdas;
            }
            "tv.inner_iters" => self.tv.inner_iters = positive_usize(key, value, line)?,
            "tv.iterations" => self.tv.iterations = positive_usize(key, value, line)?,
            "transfer.lr" => self.transfer.lr = nonneg_f64(key, value, line)?,
            "transfer.epochs" => self.transfer.epochs = positive_usize(key, value, line)?,
            "transfer.n_pairs" => self.transfer.n_pairs = positive_usize(key, value, line)?,
            "transfer.n_test" => self.transfer.n_test = positive_usize(key, value, line)?,
            "transfer.reference_lambda" => self.transfer.reference_lambda = positive_f64(key, value, line)?,
            "transfer.reference_iterations" => {
                self.transfer.reference_iterations = positive_usize(key, value, line)?
            }
            "bench.timing_runs" => self.bench.timing_runs = positive_usize(key, value, line)?,
            "bench.sound_speed_shift" => self.bench.sound_speed_shift = nonneg_f64(key, value, line)?,
            "bench.noise_shift" => {
                let v = nonneg_f64(key, value, line)?;
                if v >= 1.0 {
                    return Err(range_error(key, "below 1", line));
                }
                self.bench.noise_shift = v;
            }
            "paths.cache" => self.paths.cache = value.to_string(),
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                })
            }
        }
        Ok(())
    }

    /// Cross-field checks that no single line can violate.
    pub fn validate(&self) -> Result<()> {
        let sensors = self.geometry()?.sensors().len();
        if self.geometry.subsample_factor > sensors {
            return Err(Error::Config {
                line: 0,
                message: format!(
                    "geometry.subsample_factor {} exceeds the {sensors} sensors",
                    self.geometry.subsample_factor
                ),
            });
        }
        Ok(())
    }

    /// Overrides every seed from one base value.
    pub fn reseed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.geometry.mask_seed = seed.wrapping_add(1);
        self.dgd.seed = seed.wrapping_add(2);
        self.unet.seed = seed.wrapping_add(3);
    }

    /// Canonical text: every key, fixed order, values that reparse exactly.
    pub fn serialize(&self) -> String {
        let g = &self.geometry;
        let d = &self.data;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("geometry.dims", fmt_list(&g.dims));
        kv("geometry.dx", format!("{:?}", g.dx));
        kv("geometry.sound_speed", format!("{:?}", g.sound_speed));
        kv("geometry.n_t", g.n_t.to_string());
        kv("geometry.dt", g.dt.map_or("auto".to_string(), |v| format!("{v:?}")));
        kv("geometry.sensor_pitch", g.sensor_pitch.to_string());
        kv("geometry.subsample_factor", g.subsample_factor.to_string());
        kv("geometry.mask_seed", g.mask_seed.to_string());
        kv("data.n_train", d.n_train.to_string());
        kv("data.n_test", d.n_test.to_string());
        kv("data.snr", format!("{:?}", d.snr));
        kv("data.background", d.background.to_string());
        kv("data.background_sigma", format!("{:?}", d.background_sigma));
        kv("data.phantom", d.phantom.name().to_string());
        kv("data.seed", d.seed.to_string());
        kv("dgd.k_max", self.dgd.k_max.to_string());
        kv("dgd.steps_per_stage", self.dgd.steps_per_stage.to_string());
        kv("dgd.batch", self.dgd.batch.to_string());
        kv("dgd.lr", format!("{:?}", self.dgd.lr));
        kv("dgd.loss_add_alpha", format!("{:?}", self.dgd.loss_add_alpha));
        kv("dgd.loss_add_beta", format!("{:?}", self.dgd.loss_add_beta));
        kv("dgd.seed", self.dgd.seed.to_string());
        kv("unet.epochs", self.unet.epochs.to_string());
        kv("unet.batch", self.unet.batch.to_string());
        kv("unet.lr", format!("{:?}", self.unet.lr));
        kv("unet.seed", self.unet.seed.to_string());
        kv("tv.lambdas", fmt_list(&self.tv.lambdas));
        kv("tv.inner_iters", self.tv.inner_iters.to_string());
        kv("tv.iterations", self.tv.iterations.to_string());
        kv("transfer.lr", format!("{:?}", self.transfer.lr));
        kv("transfer.epochs", self.transfer.epochs.to_string());
        kv("transfer.n_pairs", self.transfer.n_pairs.to_string());
        kv("transfer.n_test", self.transfer.n_test.to_string());
        kv("transfer.reference_lambda", format!("{:?}", self.transfer.reference_lambda));
        kv("transfer.reference_iterations", self.transfer.reference_iterations.to_string());
        kv("bench.timing_runs", self.bench.timing_runs.to_string());
        kv("bench.sound_speed_shift", format!("{:?}", self.bench.sound_speed_shift));
        kv("bench.noise_shift", format!("{:?}", self.bench.noise_shift));
        kv("paths.cache", self.paths.cache.clone());
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.serialize().as_bytes())
    }

    /// Full-aperture geometry (no sub-sampling).
    pub fn geometry(&self) -> Result<AcousticGeometry> {
        let g = &self.geometry;
        let dt = g.dt.unwrap_or_else(|| default_dt(&g.dims, g.dx, g.sound_speed, g.n_t));
        AcousticGeometry::new(
            &g.dims,
            g.dx,
            g.sound_speed,
            g.n_t,
            dt,
            g.sensor_pitch,
            &default_padding(g.dims.len()),
        )
    }

    pub fn full_operator(&self) -> Result<AcousticOperator> {
        Ok(AcousticOperator::new(self.geometry()?))
    }

    /// Sub-sampled operator for a given mask seed.
    pub fn operator_with_mask_seed(&self, mask_seed: u64) -> Result<AcousticOperator> {
        let geometry = self.geometry()?;
        let mask = make_subsampling_mask(
            &geometry,
            self.geometry.subsample_factor,
            &mut SeededRng::new(mask_seed),
        )?;
        Ok(AcousticOperator::new(geometry.with_mask(mask)?))
    }

    pub fn operator(&self) -> Result<AcousticOperator> {
        self.operator_with_mask_seed(self.geometry.mask_seed)
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec::for_kind(self.data.phantom, 0)
    }

    pub fn dataset_options(&self, seed: u64, background: bool) -> DatasetOptions {
        DatasetOptions {
            snr: self.data.snr,
            background_sigma: background.then_some(self.data.background_sigma),
            seed,
        }
    }

    pub fn train_options(&self) -> DatasetOptions {
        self.dataset_options(self.data.seed, self.data.background)
    }

    pub fn test_options(&self) -> DatasetOptions {
        self.dataset_options(self.data.seed.wrapping_add(TEST_SEED_OFFSET), self.data.background)
    }

    pub fn stage_hyper(&self) -> StageHyper {
        StageHyper {
            steps: self.dgd.steps_per_stage,
            batch: self.dgd.batch,
            lr: self.dgd.lr,
            seed: self.dgd.seed,
            penalty: Some((self.dgd.loss_add_alpha, self.dgd.loss_add_beta)),
        }
    }

    pub fn unet_hyper(&self) -> UnetHyper {
        UnetHyper {
            epochs: self.unet.epochs,
            batch: self.unet.batch,
            lr: self.unet.lr,
            seed: self.unet.seed,
            penalty: Some((self.dgd.loss_add_alpha, self.dgd.loss_add_beta)),
        }
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        (!self.paths.cache.is_empty()).then(|| Path::new(&self.paths.cache))
    }
}
