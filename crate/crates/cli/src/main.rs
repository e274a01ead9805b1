use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mfvlr::checkpoint;
use mfvlr::datagen::{self, DatasetSpec, ImageSample};
use mfvlr::gradsuite;
use mfvlr::model::{self, Model};
use mfvlr::text::Family;
use mfvlr::trainer::{self, Adam, TrainConfig, TrainState, LOSS_CSV_HEADER};
use mfvlr::{Error, ModelConfig, Tensor};

const CONFIG_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "mfvlr", version, about = "Desk-scale vision-language forgery detection and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forgery dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint plus a loss log.
    Train(Train),
    /// Evaluate a checkpoint on a dataset and print the metrics CSV.
    Eval(Eval),
    /// Classify one image and write its predicted mask.
    Infer(Infer),
    /// Check analytic gradients against central differences.
    Gradcheck(Gradcheck),
    /// Fréchet distances between real and fake residual statistics.
    Priors(Priors),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Ratios real:efs:am:fs.
    #[arg(long, default_value = "3:1:1:1")]
    mix: String,
    /// Comma-separated generator families.
    #[arg(long, default_value = "diffusion,gan")]
    families: String,
}

#[derive(Args)]
struct Train {
    #[arg(long, required_unless_present = "print_config")]
    data: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Loss CSV path (default: the checkpoint path with `.loss.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a checkpoint, keeping its step count and optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write the CSV report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A sample blob from a generated dataset, or a PNG/PPM image.
    #[arg(long)]
    image: PathBuf,
    /// Where to write the predicted mask as binary PGM.
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the module and full-model checks on a reduced configuration.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct Priors {
    #[arg(long)]
    data: PathBuf,
}

/// Model and training configuration accepted by `train --config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Contract(_) => 2,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Priors(a) => priors(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `MFVLR_THREADS` caps the worker pool used by data generation.
fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("MFVLR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MFVLR_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn gen_data(a: GenData) -> CmdResult {
    let mut spec = DatasetSpec::new(a.seed, a.n, a.size);
    spec.mix = DatasetSpec::parse_mix(&a.mix)?;
    spec.families = a
        .families
        .split(',')
        .map(|f| Family::parse(f.trim()))
        .collect::<mfvlr::Result<_>>()
        .map_err(|e| usage(e.to_string()))?;
    let samples = datagen::generate(&spec)?;
    datagen::write_dataset(&samples, &a.out, Some(&spec))?;
    let fakes = samples.iter().filter(|s| s.labels.is_fake()).count();
    println!("wrote {} samples ({} real, {fakes} fake) to {}", samples.len(), samples.len() - fakes, a.out.display());
    Ok(())
}

fn load_run_config(a: &Train) -> Result<RunConfig, Failure> {
    let mut rc = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let rc: RunConfig =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            if rc.version != CONFIG_VERSION {
                return Err(usage(format!("config version {} is not {CONFIG_VERSION}", rc.version)));
            }
            rc
        }
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(b) = a.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        rc.train.schedule.base_lr = lr;
    }
    if a.max_steps.is_some() {
        rc.train.max_steps = a.max_steps;
    }
    rc.model.validate()?;
    if rc.train.batch_size == 0 {
        return Err(usage("batch size must be positive"));
    }
    Ok(rc)
}

fn train(a: Train) -> CmdResult {
    let rc = load_run_config(&a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&rc).map_err(Error::from)?);
        return Ok(());
    }
    let (data, out) = (a.data.expect("required by clap"), a.out.expect("required by clap"));
    let samples = datagen::read_dataset(&data)?;
    if samples.is_empty() {
        return Err(Failure {
            code: 3,
            message: format!("dataset {} is empty", data.display()),
        });
    }
    let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("loss.csv"));

    let (mut model, mut opt, mut state) = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path, Some(&rc.model))?;
            (ck.model, ck.opt, ck.state)
        }
        None => {
            let model = Model::new(&rc.model, rc.train.seed)?;
            let opt = Adam::new(&model.params);
            let state = TrainState {
                seed: rc.train.seed,
                ..TrainState::default()
            };
            (model, opt, state)
        }
    };
    if let Some(bad) = samples.iter().map(|s| s.image.shape()).find(|s| *s != [3, rc.model.image_size, rc.model.image_size]) {
        return Err(Error::Dimension(format!("dataset image {bad:?} does not match image_size {}", rc.model.image_size)).into());
    }

    let fresh_log = a.resume.is_none() || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)?;
    let mut log = BufWriter::new(file);
    if fresh_log {
        writeln!(log, "{LOSS_CSV_HEADER}")?;
    }

    let tc = rc.train.clone();
    let every = tc.checkpoint_every;
    let mut on_epoch = |m: &Model, o: &Adam, s: &TrainState| -> mfvlr::Result<()> {
        eprintln!("epoch {} done, step {}", s.epoch, s.step);
        if every > 0 && s.epoch.is_multiple_of(every) {
            checkpoint::save(&out, m, o, &tc, s)?;
        }
        Ok(())
    };
    let result = trainer::train(&samples, &mut model, &mut opt, &mut state, &rc.train, &mut log, &mut on_epoch);
    log.flush()?;
    result?;
    checkpoint::save(&out, &model, &opt, &rc.train, &state)?;
    println!("trained to step {} (epoch {}); checkpoint {}", state.step, state.epoch, out.display());
    Ok(())
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn eval(a: Eval) -> CmdResult {
    let ck = checkpoint::load(&a.checkpoint, None)?;
    let samples = datagen::read_dataset(&a.data)?;
    let ev = trainer::evaluate(&samples, &ck.model)?;
    let mut buf = Vec::new();
    writeln!(buf, "{}", mfvlr::metrics::MetricsReport::CSV_HEADER)?;
    ev.report.write_csv(&mut buf, &dataset_name(&a.data), "all")?;
    io::stdout().write_all(&buf)?;
    if let Some(path) = a.out {
        fs::write(path, &buf)?;
    }
    Ok(())
}

fn load_image(path: &Path) -> Result<Tensor, Failure> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png" | "ppm" | "pnm") => {
            let img = image::open(path)
                .map_err(|e| Failure {
                    code: 3,
                    message: format!("{}: {e}", path.display()),
                })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
                }
            }
            Ok(Tensor::new(&[3, h, w], data)?)
        }
        _ => {
            let bytes = fs::read(path)?;
            let sample: ImageSample = datagen::decode_sample(&bytes, &path.display().to_string())?;
            Ok(sample.image)
        }
    }
}

fn infer(a: Infer) -> CmdResult {
    let ck = checkpoint::load(&a.checkpoint, None)?;
    let image = load_image(&a.image)?;
    let p = model::predict(&ck.model.params, &image, &ck.model.vision)?;
    let label = if p.class == 1 { "fake" } else { "real" };
    println!("{label} {:.6}", p.probabilities[p.class]);
    if let Some(path) = a.mask_out {
        let mut f = BufWriter::new(File::create(&path)?);
        p.mask.write_pgm(&mut f)?;
        f.flush()?;
    }
    Ok(())
}

fn gradcheck(a: Gradcheck) -> CmdResult {
    let cfg = if a.quick {
        ModelConfig {
            image_size: 16,
            h: 4,
            w: 4,
            c: 16,
            base_channels: 4,
            d: 16,
            n: 12,
            ..ModelConfig::desk()
        }
    } else {
        ModelConfig::desk()
    };
    let results = gradsuite::run(a.seed, &cfg)?;
    let mut failed = false;
    println!("module,worst_rel_error,status");
    for (module, worst) in gradsuite::worst_per_module(&results) {
        let ok = worst < gradsuite::TOLERANCE;
        failed |= !ok;
        println!("{module},{worst:.3e},{}", if ok { "ok" } else { "FAIL" });
    }
    if failed {
        return Err(Failure {
            code: 4,
            message: format!("gradient error above {:e}", gradsuite::TOLERANCE),
        });
    }
    Ok(())
}

fn priors(a: Priors) -> CmdResult {
    let samples = datagen::read_dataset(&a.data)?;
    let rows = datagen::prior_report(&samples, &datagen::box_blur)?;
    println!("family,real,fake,frechet");
    for r in rows {
        println!("{},{},{},{:.6e}", r.family.code(), r.real, r.fake, r.distance);
    }
    Ok(())
}
