mod config;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boxboot::data::netpbm::encode_pgm;
use boxboot::data::{read_dataset, write_dataset, Dataset, MANIFEST};
use boxboot::gradsuite::{run_suite, Suite, SuiteOptions};
use boxboot::net::{checkpoint, Network};
use boxboot::train::{check_compatible, evaluate, metrics_csv, validation_maps};
use boxboot::{Error, Trainer64};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "boxboot", version, about = "Uncertainty-gated bootstrapping for box-supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a network and write metrics.csv and final.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    GradCheck {
        /// Run only the suite for this loss variant (or `Network`).
        #[arg(long)]
        loss: Option<String>,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// A failure mapped to its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn check(message: impl Display) -> Self {
        Self { code: 1, message: message.to_string() }
    }

    fn usage(message: impl Display) -> Self {
        Self { code: 2, message: message.to_string() }
    }

    fn io(message: impl Display) -> Self {
        Self { code: 3, message: message.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            e if e.is_io() => Failure::io(e),
            e @ (Error::InvalidParameter(_) | Error::ShapeMismatch(_) | Error::EmptyPool(_)) => Failure::usage(e),
            e => Failure::check(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn gen_data(config: &Path, out: &Path, n: usize) -> CmdResult {
    let cfg = load_config(config)?;
    let data = Dataset::generate(&cfg.scene, n, cfg.pp_ratio)?;
    write_dataset(out, &data)?;
    let manifest = out.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Failure::io(format!("{}: {e}", manifest.display())))?;
    println!("{}", text.lines().next().unwrap_or_default());
    Ok(())
}

fn export_masks(net: &Network<f64>, data: &Dataset, cfg: &RunConfig, out: &Path) -> CmdResult {
    let dir = out.join("masks");
    fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    let (w, h) = (data.width, data.height);
    let classes = u32::from(data.classes.max(1));
    for maps in validation_maps(net, data, cfg.train.tau, cfg.train.slope)? {
        let pred: Vec<u8> = maps.prediction.iter().map(|&c| (u32::from(c) * 255 / classes) as u8).collect();
        let weight: Vec<u8> = maps.weight.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8).collect();
        let flip: Vec<u8> = maps.flipped.iter().map(|&f| if f { 255 } else { 0 }).collect();
        let i = maps.index;
        write_file(&dir.join(format!("pred_{i}.pgm")), encode_pgm(w, h, &pred))?;
        write_file(&dir.join(format!("w_{i}.pgm")), encode_pgm(w, h, &weight))?;
        write_file(&dir.join(format!("flip_{i}.pgm")), encode_pgm(w, h, &flip))?;
    }
    Ok(())
}

fn train(config: &Path, data_dir: &Path, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let data = read_dataset(data_dir)?;
    fs::create_dir_all(out).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
    let mut trainer = Trainer64::new(&data, cfg.train.clone())?;
    let outcome = trainer.run();

    // Parameters and history are kept even when a step fails.
    write_file(&out.join("metrics.csv"), metrics_csv(trainer.records()))?;
    checkpoint::save(trainer.network(), &out.join("final.ckpt"))?;
    if let Err(e) = outcome {
        return Err(Failure::check(format!(
            "training aborted after {} steps: {e}",
            trainer.steps_done()
        )));
    }
    if cfg.export_masks {
        export_masks(trainer.network(), &data, &cfg, out)?;
    }
    let miou = trainer.records().last().map_or(f64::NAN, |r| r.miou);
    println!("miou={miou}");
    Ok(())
}

fn parse_suite(name: &str) -> Result<Suite, Failure> {
    Suite::ALL.into_iter().find(|s| s.name() == name).ok_or_else(|| {
        let names: Vec<_> = Suite::ALL.iter().map(|s| s.name()).collect();
        Failure::usage(format!("unknown suite {name:?}; expected one of {}", names.join(", ")))
    })
}

fn grad_check(loss: Option<&str>, inject_sign_flip: bool) -> CmdResult {
    let suites = match loss {
        Some(name) => vec![parse_suite(name)?],
        None => Suite::ALL.to_vec(),
    };
    let opts = SuiteOptions { seed: 0, inject_sign_flip };
    let mut failed = Vec::new();
    for suite in suites {
        let r = run_suite(suite, opts)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "suite={} checks={} max_rel_err={:.3e} tol={:.0e} {verdict}",
            r.suite, r.checks, r.max_rel_err, r.tolerance
        );
        if !r.passed() {
            failed.push(r.suite.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::check(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn eval(ckpt: &Path, data_dir: &Path) -> CmdResult {
    let net: Network<f64> = checkpoint::load(ckpt)?;
    let data = read_dataset(data_dir)?;
    check_compatible(&net, &data, None)?;
    let e = evaluate(&net, &data, boxboot::loss::DEFAULT_TAU)?;
    for (c, v) in e.iou.iter().enumerate() {
        println!("iou_c{}={v}", c + 1);
    }
    println!("miou={}", e.miou);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData { config, out, n } => gen_data(config, out, *n),
        Command::Train { config, data, out } => train(config, data, out),
        Command::GradCheck { loss, inject_sign_flip } => grad_check(loss.as_deref(), *inject_sign_flip),
        Command::Eval { ckpt, data } => eval(ckpt, data),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("boxboot: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
