//! `mcmri` command-line entry point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcmri::budget::RatioMode;
use mcmri::config::{Baseline, Objective, TrainConfig};
use mcmri::data::Dataset;
use mcmri::io::{self, NamedArray, NamedArrays};
use mcmri::t2star::{foreground_mask, train_regressor, RegressorTrainConfig, T2Regressor, DEFAULT_DILATION, T2_MAX};
use mcmri::trainer::{evaluate_with, run_ablation_nblocks, MapEval, MapPredictor, Trainer, HISTOGRAM_BIN};
use mcmri::Error;
use serde::Serialize;

mod plot;

#[derive(Parser, Debug)]
#[command(name = "mcmri", version, about = "Joint multi-contrast MRI sampling, reconstruction and T2* mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file; missing keys take built-in values [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; every artifact is written below it
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training seed, or the phantom seed for gen-data [default: config value, built-in 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Baseline configuration a..g [default: config value, built-in g]
    #[arg(long)]
    baseline: Option<Baseline>,
    /// Overall sparsity, the inverse of the acceleration [default: config value, built-in 0.25]
    #[arg(long)]
    alpha: Option<f64>,
    /// Ratio mode, fixed or learnable [default: config value, built-in fixed]
    #[arg(long)]
    ratio_mode: Option<RatioMode>,
    /// Number of recurrent blocks [default: config value, built-in 3]
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples [default: config value, built-in 24]
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train against the reconstruction loss
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train against the T2* map loss
    TrainMap {
        #[command(flatten)]
        common: Common,
        /// Trained regressor JSON [default: config value, else fitted on the fly]
        #[arg(long)]
        regressor: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by train or train-map [default: none, required]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory written by gen-data [default: checkpoint config]
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also report zero-filled reconstructions under the same masks [default: off]
        #[arg(long)]
        zero_filled: bool,
    },
    /// Train one model per block count and tabulate PSNR/SSIM
    AblateBlocks {
        #[command(flatten)]
        common: Common,
        /// Comma-separated block counts
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        list: Vec<usize>,
    },
    /// Train the T2* regressor on simulated decays
    FitRegressor {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps [default: config value, built-in 20000]
        #[arg(long)]
        steps: Option<usize>,
        /// Simulated decays [default: config value, built-in 100000]
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Emit one mask histogram image per contrast
    PlotMasks {
        #[command(flatten)]
        common: Common,
        /// Checkpoint [default: none, required]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit reference, reconstructed and error T2* map images
    PlotMaps {
        #[command(flatten)]
        common: Common,
        /// Checkpoint [default: none, required]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Regressor JSON [default: the checkpoint's regressor]
        #[arg(long)]
        regressor: Option<PathBuf>,
        /// Test-split sample to draw
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Config(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn category(&self) -> (&'static str, u8) {
        match self {
            CliError::Config(_) | CliError::Core(Error::Config(_)) => ("config", 3),
            CliError::Core(Error::Io(_)) => ("io", 1),
            CliError::Core(_) => ("runtime", 1),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    inputs: Vec<FileRecord>,
    config_sha256: String,
    outputs: Vec<FileRecord>,
}

/// Output directory plus a record of everything read and written.
struct Run {
    out: PathBuf,
    command: String,
    inputs: Vec<FileRecord>,
    outputs: Vec<String>,
    config_hash: String,
}

impl Run {
    fn new(out: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(out)?;
        Ok(Run {
            out: out.to_path_buf(),
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config_hash: String::new(),
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(FileRecord {
            path: path.display().to_string(),
            sha256: io::sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        io::write_atomic(&self.path(name), bytes)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Registers a file produced by another writer.
    fn produced(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn finish(self) -> CliResult<()> {
        let outputs = self
            .outputs
            .iter()
            .map(|name| {
                Ok(FileRecord {
                    path: name.clone(),
                    sha256: io::sha256_hex(&fs::read(self.out.join(name))?),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let m = RunManifest {
            command: self.command,
            inputs: self.inputs,
            config_sha256: self.config_hash,
            outputs,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        io::write_atomic(&self.out.join("run_manifest.json"), text.as_bytes())?;
        Ok(())
    }
}

/// Loads the configuration, applies flag overrides and records the hash of
/// the effective configuration. Returns the verbatim file text as well.
fn load_config(common: &Common, run: &mut Run) -> CliResult<(TrainConfig, String)> {
    let text = match &common.config {
        Some(p) => String::from_utf8(run.input(p)?)
            .map_err(|_| CliError::Config(format!("{} is not UTF-8", p.display())))?,
        None => String::new(),
    };
    let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| CliError::Config(e.message().to_string()))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(b) = common.baseline {
        cfg.baseline = b;
    }
    if let Some(a) = common.alpha {
        cfg.alpha = a;
    }
    if let Some(m) = common.ratio_mode {
        cfg.ratio_mode = m;
    }
    if let Some(n) = common.blocks {
        cfg.n_blocks = n;
    }
    cfg.validate()?;
    run.config_hash = io::sha256_hex(cfg.to_toml()?.as_bytes());
    Ok((cfg, text))
}

fn load_data(cfg: &TrainConfig, dir: Option<&Path>, run: &mut Run) -> CliResult<Dataset> {
    let dir = dir.map(Path::to_path_buf).or_else(|| cfg.data_dir.as_ref().map(PathBuf::from));
    match dir {
        Some(d) => {
            run.input(&d.join(mcmri::data::MANIFEST_NAME))?;
            let (data, manifest) = Dataset::load(&d)?;
            let p = &manifest.phantom;
            if (p.height, p.width, p.contrasts) != (cfg.height, cfg.width, cfg.contrasts) {
                return Err(CliError::Config(format!(
                    "dataset is {}x{} with {} contrasts, configuration expects {}x{} with {}",
                    p.height, p.width, p.contrasts, cfg.height, cfg.width, cfg.contrasts
                )));
            }
            Ok(data)
        }
        None => Ok(Dataset::generate(
            &cfg.phantom_config(),
            cfg.n_samples,
            cfg.data_seed,
            cfg.train_frac,
            cfg.val_frac,
        )?),
    }
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?)
}

fn regressor_config(cfg: &TrainConfig) -> RegressorTrainConfig {
    RegressorTrainConfig {
        samples: cfg.regressor_samples,
        steps: cfg.regressor_steps,
        delta_t: cfg.delta_t,
        contrasts: cfg.contrasts,
        seed: cfg.seed,
        ..RegressorTrainConfig::default()
    }
}

fn read_regressor(path: &Path, run: &mut Run) -> CliResult<T2Regressor> {
    let bytes = run.input(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{} is not a regressor: {e}", path.display())))
}

fn load_checkpoint(path: Option<&PathBuf>, run: &mut Run) -> CliResult<Trainer> {
    let path = path.ok_or_else(|| CliError::Config("a checkpoint path is required (--checkpoint)".into()))?;
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    run.input(path)?;
    Ok(Trainer::load_checkpoint(path)?)
}

fn train(common: &Common, objective: Objective, regressor: Option<&PathBuf>, command: &str) -> CliResult<()> {
    let mut run = Run::new(&common.out, command)?;
    let (mut cfg, text) = load_config(common, &mut run)?;
    cfg.objective = objective;
    let reg = match objective {
        Objective::Rec => None,
        Objective::Map => {
            let path = regressor.cloned().or_else(|| cfg.regressor.as_ref().map(PathBuf::from));
            Some(match path {
                Some(p) => read_regressor(&p, &mut run)?,
                None => {
                    let r = train_regressor(&regressor_config(&cfg))?;
                    run.write("regressor.json", to_json(&r)?.as_bytes())?;
                    r
                }
            })
        }
    };
    let data = load_data(&cfg, None, &mut run)?;
    run.write("config.toml", text.as_bytes())?;
    let mut trainer = Trainer::new(cfg, &text, reg)?;
    let mut log = fs::File::create(run.path("log.jsonl"))?;
    let report = trainer.fit(&data, |entry| {
        let line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
        println!("{line}");
        writeln!(log, "{line}")?;
        Ok(())
    })?;
    run.produced("log.jsonl");
    trainer.save_checkpoint(&run.path("checkpoint.safetensors"))?;
    run.produced("checkpoint.safetensors");
    write_report(&mut run, "report", &report, &text)?;
    run.finish()
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a str,
    report: &'a mcmri::metrics::MetricsReport,
}

fn write_report(run: &mut Run, stem: &str, report: &mcmri::metrics::MetricsReport, config_text: &str) -> CliResult<()> {
    let json = to_json(&ReportFile {
        config: config_text,
        report,
    })?;
    run.write(&format!("{stem}.json"), json.as_bytes())?;
    run.write(&format!("{stem}.csv"), report.to_csv()?.as_bytes())?;
    println!(
        "mean PSNR {:.3} dB, mean SSIM {:.4}",
        report.mean_psnr, report.mean_ssim
    );
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, n } => {
            let mut run = Run::new(&common.out, "gen-data")?;
            let (mut cfg, _) = load_config(&common, &mut run)?;
            if let Some(n) = n {
                cfg.n_samples = n;
            }
            let seed = common.seed.unwrap_or(cfg.data_seed);
            let data = Dataset::generate(&cfg.phantom_config(), cfg.n_samples, seed, cfg.train_frac, cfg.val_frac)?;
            let manifest = data.save(&run.out, &cfg.phantom_config(), seed, cfg.train_frac, cfg.val_frac)?;
            for s in &manifest.samples {
                run.produced(&s.path);
            }
            run.produced(mcmri::data::MANIFEST_NAME);
            println!("wrote {} samples", manifest.samples.len());
            run.finish()
        }
        Command::Train { common } => train(&common, Objective::Rec, None, "train"),
        Command::TrainMap { common, regressor } => train(&common, Objective::Map, regressor.as_ref(), "train-map"),
        Command::Eval {
            common,
            checkpoint,
            data_dir,
            zero_filled,
        } => {
            let mut run = Run::new(&common.out, "eval")?;
            let trainer = load_checkpoint(checkpoint.as_ref(), &mut run)?;
            let cfg = trainer.config().clone();
            run.config_hash = io::sha256_hex(cfg.to_toml()?.as_bytes());
            let data = load_data(&cfg, data_dir.as_deref(), &mut run)?;
            let test = data.test();
            let report = trainer.evaluate(&test)?;
            write_report(&mut run, "report", &report, trainer.config_text())?;
            if zero_filled {
                let maps = trainer.regressor().map(|r| MapEval {
                    reference: r,
                    predictor: MapPredictor::LogLinear {
                        delta_t: cfg.delta_t,
                        threshold: cfg.t2_threshold,
                    },
                });
                let zf = evaluate_with(None, &trainer.eval_masks(), &trainer.alphas(), &test, maps, cfg.batch_size)?;
                write_report(&mut run, "report_zero_filled", &zf, trainer.config_text())?;
            }
            run.finish()
        }
        Command::AblateBlocks { common, list } => {
            let mut run = Run::new(&common.out, "ablate-blocks")?;
            let (cfg, text) = load_config(&common, &mut run)?;
            let data = load_data(&cfg, None, &mut run)?;
            let rows = run_ablation_nblocks(&cfg, &text, &data, &list, None)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
                println!("N_l={} PSNR {:.3} SSIM {:.4}", r.n_blocks, r.mean_psnr, r.mean_ssim);
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            run.write("ablation.csv", &bytes)?;
            run.write("ablation.json", to_json(&rows)?.as_bytes())?;
            run.finish()
        }
        Command::FitRegressor { common, steps, samples } => {
            let mut run = Run::new(&common.out, "fit-regressor")?;
            let (cfg, _) = load_config(&common, &mut run)?;
            let mut rc = regressor_config(&cfg);
            if let Some(s) = steps {
                rc.steps = s;
            }
            if let Some(s) = samples {
                rc.samples = s;
            }
            let r = train_regressor(&rc)?;
            run.write("regressor.json", to_json(&r)?.as_bytes())?;
            run.finish()
        }
        Command::PlotMasks { common, checkpoint } => {
            let mut run = Run::new(&common.out, "plot-masks")?;
            let trainer = load_checkpoint(checkpoint.as_ref(), &mut run)?;
            run.config_hash = io::sha256_hex(trainer.config().to_toml()?.as_bytes());
            let masks = trainer.eval_masks();
            for (c, m) in masks.iter().enumerate() {
                let hist = mcmri::metrics::mask_histogram(m, HISTOGRAM_BIN)?;
                let name = format!("mask_hist_c{c}.png");
                plot::histogram(&hist, &run.path(&name))?;
                run.produced(&name);
            }
            run.write("masks.txt", mcmri::maskgen::masks_to_text(&masks).as_bytes())?;
            run.finish()
        }
        Command::PlotMaps {
            common,
            checkpoint,
            regressor,
            index,
        } => {
            let mut run = Run::new(&common.out, "plot-maps")?;
            let trainer = load_checkpoint(checkpoint.as_ref(), &mut run)?;
            let cfg = trainer.config().clone();
            run.config_hash = io::sha256_hex(cfg.to_toml()?.as_bytes());
            let reg = match regressor {
                Some(p) => read_regressor(&p, &mut run)?.with_input_scale(cfg.map_input_scale)?,
                None => trainer.regressor().cloned().ok_or_else(|| {
                    CliError::Config("checkpoint carries no regressor; pass --regressor".into())
                })?,
            };
            let data = load_data(&cfg, None, &mut run)?;
            let test = data.test();
            let sample = *test
                .get(index)
                .ok_or_else(|| CliError::Config(format!("test split has {} samples", test.len())))?;
            let maps = plot::t2star_panels(&trainer, &reg, sample)?;
            for (k, (gt, rec)) in sample.magnitudes().iter().zip(&maps.magnitudes).enumerate() {
                let top = gt.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
                for (tag, img) in [("reference", gt), ("recon", rec)] {
                    let file = format!("{tag}_c{k}.png");
                    plot::gray(img, top, &run.path(&file))?;
                    run.produced(&file);
                }
            }
            let fg = foreground_mask(&sample.magnitudes(), DEFAULT_DILATION)?;
            let mut arrays = NamedArrays::new();
            let (h, w) = sample.dims();
            for (name, m) in [("reference", &maps.reference), ("reconstructed", &maps.reconstructed)] {
                let file = format!("t2star_{name}.png");
                plot::gray(m, T2_MAX, &run.path(&file))?;
                run.produced(&file);
                arrays.insert(name.into(), NamedArray::new(&[h, w], m.iter().copied().collect())?);
            }
            let err = (&maps.reconstructed - &maps.reference).mapv(f64::abs);
            plot::gray(&err, T2_MAX / 4.0, &run.path("t2star_error.png"))?;
            run.produced("t2star_error.png");
            plot::gray(&fg.mask.mapv(|b| if b { 1.0 } else { 0.0 }), 1.0, &run.path("foreground.png"))?;
            run.produced("foreground.png");
            let fgm = fg.mask.mapv(|b| if b { 1.0 } else { 0.0 });
            arrays.insert("foreground".into(), NamedArray::new(&[h, w], fgm.iter().copied().collect())?);
            io::save_named(&run.path("t2star_maps.safetensors"), &arrays, None)?;
            run.produced("t2star_maps.safetensors");
            run.finish()
        }
    }
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("MCMRI_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("MCMRI_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = e.category();
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(code)
        }
    }
}
