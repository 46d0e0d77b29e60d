//! `microtee` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::rng;
use crate::secure_boot::{SignedImage, Stage};
use crate::security_services::keys::KeyBundle;

use super::bench::{self, BenchConfig, Suite};
use super::scenario;
use super::{Platform, PlatformError};

/// Default vendor key size; image signatures are 256 bytes.
pub const VENDOR_KEY_BITS: usize = 2048;

#[derive(Debug, Parser)]
#[command(name = "microtee", version, about = "Microkernel TEE simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Verify an image set and bring up the platform.
    Boot {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        keys: PathBuf,
    },
    /// Wrap a payload in a signed boot image.
    SignImage {
        /// BL1, SECURE_OS, BL2, MOBILE_OS, ROOT_TASK or the numeric tag.
        #[arg(long)]
        stage: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keys: PathBuf,
    },
    /// Run a named request scenario from the normal world.
    Run {
        #[arg(long)]
        scenario: String,
        #[command(flatten)]
        platform: PlatformArgs,
    },
    /// Run a benchmark suite and write CSV.
    Bench {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long)]
        csv: PathBuf,
        #[command(flatten)]
        platform: PlatformArgs,
    },
    /// Generate a key provisioning file.
    ProvisionKeys {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Where `run` and `bench` get their keys and images. Without flags a
/// platform is provisioned in memory (deterministic under MICROTEE_SEED).
#[derive(Debug, clap::Args)]
pub struct PlatformArgs {
    #[arg(long, requires = "keys")]
    images: Option<PathBuf>,
    #[arg(long)]
    keys: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuiteArg {
    Ipc,
    Switch,
    Crypto,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Ipc => Suite::Ipc,
            SuiteArg::Switch => Suite::Switch,
            SuiteArg::Crypto => Suite::Crypto,
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Platform(e.into())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn load_keys(path: &Path) -> Result<KeyBundle, CliError> {
    KeyBundle::decode(&read(path)?).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn default_keys() -> Result<KeyBundle, CliError> {
    let seed = rng::seed_from_env().unwrap_or(0);
    KeyBundle::generate(&mut rng::seeded(seed, "vendor-keys"), VENDOR_KEY_BITS)
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn platform(args: &PlatformArgs) -> Result<Platform, CliError> {
    let p = match (&args.images, &args.keys) {
        (Some(dir), Some(keys)) => Platform::boot_from_files(dir, keys)?,
        (None, Some(keys)) => Platform::boot_self_signed(load_keys(keys)?)?,
        _ => Platform::boot_self_signed(default_keys()?)?,
    };
    if !p.report().ree_available() {
        return Err(CliError::Failed(format!("boot failed:\n{}", p.report())));
    }
    Ok(p)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Boot { images, keys } => {
            let p = Platform::boot_from_files(&images, &keys)?;
            println!("{}", p.report());
            if !p.report().ree_available() {
                return Err(CliError::Failed("boot chain halted".into()));
            }
        }
        Command::SignImage {
            stage,
            input,
            out,
            keys,
        } => {
            let stage = Stage::from_name(&stage)
                .or_else(|| stage.parse().ok().and_then(Stage::from_tag))
                .ok_or_else(|| CliError::Usage(format!("unknown stage '{stage}'")))?;
            let payload = read(&input)?;
            let keys = load_keys(&keys)?;
            let img = SignedImage::sign(stage, &payload, &keys.signing_key()).map_err(PlatformError::from)?;
            fs::write(&out, img.to_bytes())?;
            println!("{stage}: {} bytes -> {}", payload.len(), out.display());
        }
        Command::Run {
            scenario: name,
            platform: args,
        } => {
            let sc = scenario::builtin(&name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown scenario '{name}' (available: {})",
                    scenario::SCENARIOS.join(", ")
                ))
            })?;
            let mut p = platform(&args)?;
            let res = scenario::run(&mut p, &sc)?;
            for l in &res.lines {
                println!("{l}");
            }
            if !res.passed {
                return Err(CliError::Failed(format!("scenario '{name}' did not match")));
            }
        }
        Command::Bench {
            suite,
            csv,
            platform: args,
        } => {
            let mut p = platform(&args)?;
            let records = bench::run_suite(&mut p, suite.into(), &BenchConfig::default())?;
            fs::write(&csv, bench::to_csv(&records))?;
            let mut ref_path = csv.clone().into_os_string();
            ref_path.push(".ref.csv");
            fs::write(&ref_path, bench::reference_csv(&records))?;
            for r in &records {
                println!("{}", r.csv_row());
            }
        }
        Command::ProvisionKeys { out, seed } => {
            let mut r = match seed.or_else(rng::seed_from_env) {
                Some(s) => rng::seeded(s, "vendor-keys"),
                None => ChaCha20Rng::from_entropy(),
            };
            let keys = KeyBundle::generate(&mut r, VENDOR_KEY_BITS).map_err(|e| CliError::Failed(e.to_string()))?;
            fs::write(&out, keys.encode())?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
