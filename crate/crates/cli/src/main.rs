//! `cipherdenoise`: operator CLI for the encrypted denoising stack.
//!
//! Exit codes are a stable contract for CI: 0 success, 1 usage or invalid
//! configuration, 2 verification failure, 3 I/O or file-format trouble,
//! 4 protocol/session failure.
//!
//! A config file named by `CIPHERDENOISE_CONFIG` (UTF-8 `key=value` lines)
//! supplies defaults for the common numeric flags; explicit flags win.

use clap::{Parser, Subcommand};
use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use cipherdenoise_core::Error as CoreError;

mod commands;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VERIFY_FAILED: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_PROTOCOL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "cipherdenoise",
    about = "Privacy-preserving CT denoising over Paillier-encrypted images",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Paillier keypair and write key.pub / key.sec
    Keygen {
        #[arg(long)]
        bits: Option<u64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Seed the keygen RNG (tests only; omit for entropy)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encrypt a PGM image into a .ctz ciphertensor
    Encrypt {
        #[arg(long)]
        pubkey: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        frac_bits: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decrypt a .ctz ciphertensor back to a PGM image
    Decrypt {
        #[arg(long)]
        privkey: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Override the cumulative scale from the file header
        #[arg(long)]
        scale: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a model over TCP
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:9670")]
        listen: String,
        #[arg(long, default_value_t = 4)]
        max_sessions: usize,
        #[arg(long)]
        min_key_bits: Option<u64>,
        #[arg(long)]
        perturb_bound: Option<u32>,
        /// Seed per-session server randomness (tests only)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full client run against a server: encrypt, session, decrypt, write PGM
    Denoise {
        #[arg(long)]
        server: String,
        #[arg(long)]
        privkey: PathBuf,
        #[arg(long)]
        pubkey: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frac_bits: Option<u32>,
        /// Demand the one-round-trip linear framework
        #[arg(long)]
        linear: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Losslessness check: encrypted pipeline vs the integer reference
    Verify {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input image; a seeded phantom is generated when omitted
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        bits: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Verify this many consecutive seeds
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        frac_bits: Option<u32>,
        /// Fault-injection hook: corrupt one server-side weight in this layer
        #[arg(long, hide = true)]
        corrupt_layer: Option<usize>,
    },
    /// Model-stealing experiment: clean vs perturbed feature recovery
    Attack {
        #[arg(long)]
        model: Option<PathBuf>,
        /// clean | perturbed | both
        #[arg(long, default_value = "both")]
        mode: String,
        /// Cap on observation equations used by the fit
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        fixed_m: bool,
        #[arg(long)]
        bits: Option<u64>,
        #[arg(long, default_value_t = 16)]
        probe_size: usize,
        #[arg(long, default_value_t = 4)]
        fit_images: usize,
        #[arg(long, default_value_t = 16)]
        heldout_images: usize,
    },
    /// Generate paired clean/noisy ellipse phantoms
    Phantom {
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20.0)]
        noise_sigma: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a demo denoiser on synthetic phantoms and write a .cdm
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 20.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0.08)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frac_bits: Option<u32>,
    },
}

/// Values from the optional CIPHERDENOISE_CONFIG file.
pub struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load() -> Result<Self, String> {
        let mut map = HashMap::new();
        if let Ok(path) = std::env::var("CIPHERDENOISE_CONFIG") {
            let text =
                std::fs::read_to_string(&path).map_err(|e| format!("config file {path}: {e}"))?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("config line without '=': {line:?}"))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    /// Flag value, else config value, else default.
    pub fn resolve<T: std::str::FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, String> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| format!("config key {key}: cannot parse {raw:?}")),
            None => Ok(default),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::from(EXIT_OK);
        }
    };
    let config = match FileConfig::load() {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli.command, &config) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &CoreError) -> u8 {
    match e {
        CoreError::Io(_) | CoreError::Parse(_) => EXIT_IO,
        CoreError::Protocol { .. } | CoreError::OrderViolation(_) | CoreError::KeyMismatch(_) => {
            EXIT_PROTOCOL
        }
        _ => EXIT_USAGE,
    }
}
