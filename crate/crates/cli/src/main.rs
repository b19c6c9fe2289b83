//! `ssr`: train, evaluate and ablate teacher-regularized segmentation models
//! on the synthetic domain-shift benchmark.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssr_core::checkpoint::Checkpoint;
use ssr_core::config::{RunConfig, TeacherSpec};
use ssr_core::data::{gen_split, read_dataset, write_dataset, Domain};
use ssr_core::model::{Segmenter, StageMask};
use ssr_core::teacher::{feature_path, save_features, TeacherModel};
use ssr_core::trainer::{evaluate, run_ablation, train_and_evaluate, Datasets};
use ssr_core::verify::run_gradcheck_suite;
use ssr_core::Error;

const EXIT_VERIFY: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "ssr", version, about = "Teacher-regularized segmentation with a shadow inference branch")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes checkpoint.ssrc, loss_log.jsonl and metrics.csv.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also write shadow.ssrc, a checkpoint holding only backbone and decoder.
        #[arg(long)]
        shadow_only: bool,
    },
    /// Evaluate a checkpoint's shadow path on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of <id>.ppm / <id>.lbl pairs.
        #[arg(long)]
        data: PathBuf,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every (mask, seed) pair and write ablation.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Semicolon-separated stage masks.
        #[arg(long, default_value = "∅;3;2,3;1,2,3;0,1,2,3")]
        masks: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Finite-difference check of every differentiable operation and the micro model.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write a synthetic split as PPM images plus .lbl label maps.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// source | target
        #[arg(long, default_value = "source")]
        domain: String,
        /// Image id prefix; defaults to the domain name.
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Run the built-in teacher over a dataset directory and write one .ssrf per image.
    ExportFeatures {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        images: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// builtin | files:<dir>
    #[arg(long)]
    teacher: Option<String>,
    /// Comma-separated stages, e.g. "1,2,3" or "∅".
    #[arg(long)]
    stage_mask: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(t) = &self.teacher {
            cfg.teacher = t.clone();
        }
        if let Some(m) = &self.stage_mask {
            cfg.stage_mask = StageMask::parse(m)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Data(_) | Error::Io(_) => EXIT_DATA,
            Error::Format(_) => EXIT_CHECKPOINT,
            Error::Shape(_) | Error::Numeric(_) | Error::Contract(_) => EXIT_VERIFY,
        };
        Self::new(code, e.to_string())
    }
}

fn io_failure(what: &str, path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_DATA, format!("{what} {}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| io_failure("cannot create directory", path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure("cannot write", path, e))
}

fn cmd_train(run: &RunArgs, shadow_only: bool) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let data = Datasets::load(&cfg)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("config.json"), cfg.to_json().as_bytes())?;

    let log_path = cfg.out_dir.join("loss_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure("cannot create", &log_path, e))?;
    let out = train_and_evaluate(&cfg, &data, |rec, report| {
        let line = serde_json::to_string(rec).expect("step record serializes");
        writeln!(log, "{line}")?;
        if let Some(r) = report {
            eprintln!("step {:>5}  L_src {:.4}  L_tgt {:.4}  q {:.3}  target mIoU {}", rec.step, rec.loss_src, rec.loss_tgt, rec.quality, ssr_core::metrics::percent(r.miou));
        }
        Ok(())
    })?;
    log.flush().map_err(|e| io_failure("cannot write", &log_path, e))?;

    let ckpt = Checkpoint::from_store(out.model.config(), &out.store, false);
    ckpt.save(&cfg.out_dir.join("checkpoint.ssrc"))?;
    if shadow_only {
        Checkpoint::from_store(out.model.config(), &out.store, true).save(&cfg.out_dir.join("shadow.ssrc"))?;
    }
    let csv = out.report.to_csv();
    write_file(&cfg.out_dir.join("metrics.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint)
        .map_err(|e| Failure::new(EXIT_CHECKPOINT, format!("checkpoint {}: {e}", checkpoint.display())))?;
    if !data.is_dir() {
        return Err(Failure::new(EXIT_DATA, format!("dataset directory {} does not exist", data.display())));
    }
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(Failure::new(EXIT_DATA, format!("no images in {}", data.display())));
    }
    let (model, store) = ckpt.into_model().map_err(|e| Failure::new(EXIT_CHECKPOINT, e.to_string()))?;
    let k = model.config().num_classes;
    if let Some(s) = samples.iter().find(|s| s.labels.iter().any(|&l| l >= k && l != ssr_core::nn::IGNORE_INDEX)) {
        return Err(Failure::new(EXIT_DATA, format!("image {:?} has labels outside the checkpoint's {k} classes", s.id)));
    }
    let report = evaluate(&model, &store, &samples)?;
    let csv = report.to_csv();
    if let Some(p) = out {
        write_file(p, csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(run: &RunArgs, masks: &str, seeds: &str) -> Result<(), Failure> {
    let masks = masks.split(';').map(StageMask::parse).collect::<ssr_core::Result<Vec<_>>>()?;
    let seeds = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| Failure::new(EXIT_CONFIG, format!("seeds: {s:?}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = run.resolve()?;
    create_dir(&cfg.out_dir)?;
    let table = run_ablation(&masks, &cfg, &seeds, |mask, seed, miou| {
        eprintln!("mask {mask:<8} seed {seed}  target mIoU {}", ssr_core::metrics::percent(miou));
    })?;
    let csv = table.to_csv()?;
    write_file(&cfg.out_dir.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(inject_fault: bool) -> Result<(), Failure> {
    let report = run_gradcheck_suite(inject_fault)?;
    for c in &report.checks {
        let verdict = if c.max_rel_error <= report.tolerance { "ok" } else { "FAIL" };
        println!("{verdict:<4} {:<60} {:.3e}", c.name, c.max_rel_error);
    }
    let worst = report.worst().expect("suite is non-empty");
    println!(
        "{} checks in {:.1}s; worst {} at {:.3e} (tolerance {:.0e})",
        report.checks.len(),
        report.seconds,
        worst.name,
        worst.max_rel_error,
        report.tolerance
    );
    let failures: Vec<String> = report.failures().map(|c| format!("{} ({:.3e})", c.name, c.max_rel_error)).collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_VERIFY, format!("gradient check failed: {}", failures.join(", "))))
    }
}

fn cmd_gen_data(seed: u64, out: &Path, domain: &str, split: Option<&str>, count: usize, classes: usize, size: usize) -> Result<(), Failure> {
    let domain = Domain::parse(domain)?;
    if size == 0 || size % 32 != 0 {
        return Err(Failure::new(EXIT_CONFIG, format!("size: {size} must be a positive multiple of 32")));
    }
    if count == 0 {
        return Err(Failure::new(EXIT_CONFIG, "count: must be at least 1"));
    }
    let samples = gen_split(seed, split.unwrap_or(domain.name()), domain, classes, size, count)?;
    create_dir(out)?;
    write_dataset(out, &samples)?;
    println!("wrote {} {} samples to {}", samples.len(), domain.name(), out.display());
    Ok(())
}

fn cmd_export_features(run: &RunArgs, images: &Path) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    if cfg.teacher_spec()? != TeacherSpec::Builtin {
        return Err(Failure::new(EXIT_CONFIG, "teacher: export-features runs the builtin teacher only"));
    }
    if !images.is_dir() {
        return Err(Failure::new(EXIT_DATA, format!("image directory {} does not exist", images.display())));
    }
    let samples = read_dataset(images)?;
    let teacher = TeacherModel::new(cfg.teacher_channels, cfg.teacher_blocks, cfg.heads, cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    for s in &samples {
        let g = teacher.forward(&s.image)?;
        save_features(&g, &feature_path(&cfg.out_dir, &s.id))?;
    }
    println!("wrote {} feature maps to {}", samples.len(), cfg.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { run, shadow_only } => cmd_train(run, *shadow_only),
        Command::Eval { checkpoint, data, out } => cmd_eval(checkpoint, data, out.as_deref()),
        Command::Ablate { run, masks, seeds } => cmd_ablate(run, masks, seeds),
        Command::Gradcheck { inject_fault } => cmd_gradcheck(*inject_fault),
        Command::GenData { seed, out, domain, split, count, classes, size } => {
            cmd_gen_data(*seed, out, domain, split.as_deref(), *count, *classes, *size)
        }
        Command::ExportFeatures { run, images } => cmd_export_features(run, images),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
