use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dgd_pat::config::ExperimentConfig;
use dgd_pat::dgd::{run_training_cycle, DgdModel};
use dgd_pat::experiments::{
    self, convergence_experiment, eval_csv, evaluate_methods, mean_measurement_std, robustness_csv,
    robustness_experiment, shifted_domain, sweep_tv_lambda, tagged_csv, timing_csv, timing_experiment,
    transfer_experiment, Method, Toolkit, CONVERGENCE_CSV_HEADER, LAMBDA_CSV_HEADER,
};
use dgd_pat::io;
use dgd_pat::par;
use dgd_pat::phantom::build_dataset;
use dgd_pat::unet::{train_unet, UnetData, UnetModel};

#[derive(Parser)]
#[command(name = "dgd-pat", version, about = "Learned iterative reconstruction for sub-sampled photoacoustic tomography")]
struct Cli {
    /// Experiment configuration (`key = value` lines); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration from one base value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Models {
    /// Trained DGD model directory.
    #[arg(long)]
    dgd: Option<PathBuf>,
    /// Trained U-Net model directory.
    #[arg(long)]
    unet: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training and test sets.
    GenerateData {
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy stage-wise training of the learned iterative scheme.
    TrainDgd {
        /// Dataset directory written by generate-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the post-processing U-Net on `(A*y, x_true)` pairs.
    TrainUnet {
        /// Dataset directory written by generate-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct one sample directory and write every kept iterate.
    Reconstruct {
        /// One of x0, nnls, tv, dgd, unet
        #[arg(long)]
        method: String,
        /// Sample directory with x_true, x0 and y (.bin/.hdr pairs)
        #[arg(long)]
        input: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Iterations for nnls/tv, or the number of learned stages to use.
        #[arg(long)]
        iterations: Option<usize>,
        /// Regularization weight for tv.
        #[arg(long)]
        lambda: Option<f64>,
        #[command(flatten)]
        models: Models,
    },
    /// Score every available method on the test set.
    Evaluate {
        /// Dataset directory written by generate-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: Models,
    },
    /// Convergence, timing and robustness experiments.
    Bench {
        /// Dataset directory written by generate-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: Models,
    },
    /// Fine-tune both networks on the background-shifted domain.
    Transfer {
        /// Dataset directory written by generate-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        models: Models,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::TrainDgd { .. } => "train-dgd",
            Command::TrainUnet { .. } => "train-unet",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Evaluate { .. } => "evaluate",
            Command::Bench { .. } => "bench",
            Command::Transfer { .. } => "transfer",
        }
    }
}

struct Run {
    config: ExperimentConfig,
    hash: String,
    command: &'static str,
}

impl Run {
    /// Writes `manifest.txt` and the canonical `config.txt` into `dir`.
    fn finish_dir(&self, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
        let c = &self.config;
        let mut entries = vec![
            ("tool".to_string(), format!("dgd-pat {}", env!("CARGO_PKG_VERSION"))),
            ("command".to_string(), self.command.to_string()),
            ("config_hash".to_string(), self.hash.clone()),
            ("data_seed".to_string(), c.data.seed.to_string()),
            ("mask_seed".to_string(), c.geometry.mask_seed.to_string()),
            ("dgd_seed".to_string(), c.dgd.seed.to_string()),
            ("unet_seed".to_string(), c.unet.seed.to_string()),
        ];
        entries.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        io::write_manifest(&dir.join("manifest.txt"), &entries)?;
        io::write_text(&dir.join("config.txt"), &c.serialize())?;
        Ok(())
    }

    fn write_csv(&self, path: &Path, header: &str, rows: &str) -> Result<()> {
        io::write_text(path, &tagged_csv(&self.hash, header, rows))?;
        Ok(())
    }
}

fn load_models(models: &Models) -> Result<(Option<DgdModel>, Option<UnetModel>)> {
    let dgd = match &models.dgd {
        Some(p) => Some(DgdModel::load(p).with_context(|| format!("loading DGD model from {}", p.display()))?),
        None => None,
    };
    let unet = match &models.unet {
        Some(p) => Some(UnetModel::load(p).with_context(|| format!("loading U-Net model from {}", p.display()))?),
        None => None,
    };
    Ok((dgd, unet))
}

fn require_models(models: &Models) -> Result<(DgdModel, UnetModel)> {
    match load_models(models)? {
        (Some(d), Some(u)) => Ok((d, u)),
        _ => bail!("this command needs both --dgd and --unet model directories"),
    }
}

fn load_split(data: &Path, split: &str) -> Result<Vec<dgd_pat::phantom::DatasetSample>> {
    let dir = data.join(split);
    experiments::load_dataset(&dir).with_context(|| format!("loading {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        par::set_threads(t);
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    let run = Run {
        hash: config.hash(),
        config,
        command: cli.command.name(),
    };
    let config = &run.config;
    match &cli.command {
        Command::GenerateData { out } => {
            let op = config.operator()?;
            let spec = config.phantom_spec();
            let train = build_dataset(config.data.n_train, &spec, &op, &config.train_options())?;
            let test = build_dataset(config.data.n_test, &spec, &op, &config.test_options())?;
            experiments::save_dataset(&out.join("train"), &train)?;
            experiments::save_dataset(&out.join("test"), &test)?;
            run.finish_dir(
                out,
                &[
                    ("n_train", train.len().to_string()),
                    ("n_test", test.len().to_string()),
                    ("geometry", op.geometry().describe()),
                ],
            )?;
            eprintln!("wrote {} training and {} test samples to {}", train.len(), test.len(), out.display());
        }
        Command::TrainDgd { data, out } => {
            let train = load_split(data, "train")?;
            let op = config.operator()?;
            let model = run_training_cycle(&train, &op, config.dgd.k_max, &config.stage_hyper(), config.cache_dir())?;
            model.save(out)?;
            run.finish_dir(out, &[("n_train", train.len().to_string())])?;
            eprintln!("staged training err: {:?}", model.log.staged_err);
        }
        Command::TrainUnet { data, out } => {
            let train = load_split(data, "train")?;
            let pairs: Vec<_> = train.iter().map(|s| (s.x0.clone(), s.x_true.clone())).collect();
            let model = train_unet(&UnetData::from_fields(&pairs)?, &config.unet_hyper())?;
            model.save(out)?;
            run.finish_dir(out, &[("n_train", train.len().to_string())])?;
            eprintln!(
                "u-net loss {:.4e} (identity {:.4e})",
                model.log.final_loss, model.log.identity_loss
            );
        }
        Command::Reconstruct {
            method,
            input,
            out,
            iterations,
            lambda,
            models,
        } => {
            let method = Method::parse(method)
                .with_context(|| format!("unknown method {method:?}; expected x0, nnls, tv, dgd or unet"))?;
            let sample = experiments::load_sample(input)
                .with_context(|| format!("loading sample {}", input.display()))?;
            let op = config.operator()?;
            let (dgd, unet) = load_models(models)?;
            let step = match method {
                Method::Nnls | Method::Tv => experiments::step_size(&op)?,
                _ => 1.0,
            };
            let mut tk = Toolkit::new(&op, step, config).with_models(dgd.as_ref(), unet.as_ref());
            if let Some(l) = lambda {
                tk.tv_lambda = *l;
            }
            let iters = iterations.unwrap_or_else(|| tk.default_iterations(method, config));
            let r = tk.reconstruct(method, &sample.y, iters)?;
            io::create_dir(out)?;
            let display_max = sample.x_true.max().max(f64::MIN_POSITIVE);
            for (k, x) in r.snapshots.iter().enumerate() {
                io::write_field(&out.join(format!("x_{k}")), x)?;
                io::write_pgm(&out.join(format!("x_{k}.pgm")), x, display_max)?;
            }
            run.finish_dir(
                out,
                &[
                    ("method", method.name().to_string()),
                    ("iterations", r.iterations.to_string()),
                    ("snapshots", r.snapshots.len().to_string()),
                ],
            )?;
        }
        Command::Evaluate { data, out, models } => {
            let test = load_split(data, "test")?;
            let op = config.operator()?;
            let (dgd, unet) = load_models(models)?;
            let mut tk = Toolkit::new(&op, experiments::step_size(&op)?, config).with_models(dgd.as_ref(), unet.as_ref());
            let sweep = sweep_tv_lambda(&tk, &test, &config.tv.lambdas, config.tv.iterations)?;
            tk.tv_lambda = sweep.best;
            let mut methods = vec![Method::Backprojection, Method::Nnls, Method::Tv];
            if dgd.is_some() {
                methods.push(Method::Dgd);
            }
            if unet.is_some() {
                methods.push(Method::Unet);
            }
            let reports = evaluate_methods(&tk, &test, &methods, config)?;
            io::create_dir(out)?;
            io::write_text(&out.join("eval.csv"), &eval_csv(&run.hash, &reports))?;
            run.write_csv(&out.join("lambda.csv"), LAMBDA_CSV_HEADER, &sweep.csv_rows())?;
            experiments::write_figures(&out.join("figures"), &tk, &test[0], config)?;
            run.finish_dir(out, &[("tv_lambda", format!("{:e}", sweep.best))])?;
            for r in &reports {
                eprintln!("{:>5}: mean err {:.4}", r.method, r.mean_err());
            }
        }
        Command::Bench { data, out, models } => {
            let test = load_split(data, "test")?;
            let op = config.operator()?;
            let (dgd, unet) = require_models(models)?;
            let mut tk = Toolkit::new(&op, experiments::step_size(&op)?, config).with_models(Some(&dgd), Some(&unet));
            let sweep = sweep_tv_lambda(&tk, &test, &config.tv.lambdas, config.tv.iterations)?;
            tk.tv_lambda = sweep.best;
            io::create_dir(out)?;
            run.write_csv(&out.join("lambda.csv"), LAMBDA_CSV_HEADER, &sweep.csv_rows())?;
            let table = convergence_experiment(&tk, &test)?;
            run.write_csv(&out.join("convergence.csv"), CONVERGENCE_CSV_HEADER, &table.csv_rows())?;
            let timing = timing_experiment(&tk, &test, config.bench.timing_runs, config.dgd.k_max)?;
            io::write_text(&out.join("timing.csv"), &timing_csv(&run.hash, &timing))?;
            let robustness = robustness_experiment(config, &tk)?;
            io::write_text(&out.join("robustness.csv"), &robustness_csv(&run.hash, &robustness))?;
            experiments::write_figures(&out.join("figures"), &tk, &test[0], config)?;
            run.finish_dir(out, &[("tv_lambda", format!("{:e}", sweep.best))])?;
        }
        Command::Transfer { data, out, models } => {
            let train = load_split(data, "train")?;
            let op = config.operator()?;
            let (dgd, unet) = require_models(models)?;
            let tk = Toolkit::new(&op, 1.0, config).with_models(Some(&dgd), Some(&unet));
            let domain = shifted_domain(config, &op, Some(mean_measurement_std(&train)?))?;
            let outcome = transfer_experiment(config, &tk, &domain)?;
            io::create_dir(out)?;
            io::write_text(&out.join("transfer.csv"), &outcome.csv(&run.hash))?;
            outcome.dgd.save(&out.join("dgd"))?;
            outcome.unet.save(&out.join("unet"))?;
            run.finish_dir(
                out,
                &[
                    ("transfer_lr", format!("{:e}", config.transfer.lr)),
                    ("transfer_epochs", config.transfer.epochs.to_string()),
                ],
            )?;
            for (m, phase, e, _) in &outcome.rows {
                eprintln!("{m:>5} {phase:>6}: mean err {e:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
