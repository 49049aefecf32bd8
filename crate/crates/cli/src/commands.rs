use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cipherdenoise_core::attacks::{run_attack_experiment, AttackConfig};
use cipherdenoise_core::ciphertensor::{decrypt_tensor, encrypt_tensor, CipherTensor};
use cipherdenoise_core::encoding::{
    overflow_budget, FixedPointParams, ScaleTag, DEFAULT_FRAC_BITS,
};
use cipherdenoise_core::model::{
    dequantize_image, load_model, quantization_drift_per_layer, quantize_image, save_model,
    ModelSpec,
};
use cipherdenoise_core::paillier;
use cipherdenoise_core::pgm::{read_pgm, write_pgm};
use cipherdenoise_core::phantom::{add_noise, generate_phantom, psnr};
use cipherdenoise_core::protocol::{
    format_metrics, serve_blocking, ClientConfig, ClientSession, ServerConfig, TcpTransport,
    PROTOCOL_VERSION_LINEAR, PROTOCOL_VERSION_NONLINEAR,
};
use cipherdenoise_core::tensor::{FloatTensor, Shape};
use cipherdenoise_core::train::{phantom_pairs, train_demo, TrainConfig};
use cipherdenoise_core::verify::{verify_seeds, VerifyOptions};
use cipherdenoise_core::{Error, Result};

use crate::{Command, FileConfig, EXIT_OK, EXIT_VERIFY_FAILED};

pub fn run(cmd: Command, config: &FileConfig) -> Result<u8> {
    match cmd {
        Command::Keygen {
            bits,
            out_dir,
            seed,
        } => keygen(config, bits, &out_dir, seed),
        Command::Encrypt {
            pubkey,
            image,
            frac_bits,
            out,
            seed,
        } => encrypt(config, &pubkey, &image, frac_bits, &out, seed),
        Command::Decrypt {
            privkey,
            input,
            scale,
            out,
        } => decrypt(&privkey, &input, scale, &out),
        Command::Serve {
            model,
            listen,
            max_sessions,
            min_key_bits,
            perturb_bound,
            seed,
        } => serve(
            config,
            model,
            &listen,
            max_sessions,
            min_key_bits,
            perturb_bound,
            seed,
        ),
        Command::Denoise {
            server,
            privkey,
            pubkey,
            image,
            out,
            frac_bits,
            linear,
            seed,
        } => denoise(
            config, &server, &privkey, &pubkey, &image, &out, frac_bits, linear, seed,
        ),
        Command::Verify {
            model,
            image,
            bits,
            seed,
            seeds,
            frac_bits,
            corrupt_layer,
        } => verify(
            config,
            model,
            image,
            bits,
            seed,
            seeds,
            frac_bits,
            corrupt_layer,
        ),
        Command::Attack {
            model,
            mode,
            probes,
            out_dir,
            seed,
            fixed_m,
            bits,
            probe_size,
            fit_images,
            heldout_images,
        } => attack(
            config,
            model,
            &mode,
            probes,
            &out_dir,
            seed,
            fixed_m,
            bits,
            probe_size,
            fit_images,
            heldout_images,
        ),
        Command::Phantom {
            count,
            size,
            noise_sigma,
            out_dir,
            seed,
        } => phantom(count, size, noise_sigma, &out_dir, seed),
        Command::Train {
            out,
            count,
            size,
            noise_sigma,
            epochs,
            lr,
            seed,
            frac_bits,
        } => train(
            config,
            &out,
            count,
            size,
            noise_sigma,
            epochs,
            lr,
            seed,
            frac_bits,
        ),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

fn rng_from(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

/// Built-in demo model when no `.cdm` is given.
fn model_or_demo(path: Option<PathBuf>) -> Result<ModelSpec> {
    match path {
        Some(p) => load_model(&p),
        None => Ok(ModelSpec::demo(Shape::new(1, 32, 32), DEFAULT_FRAC_BITS, 0)),
    }
}

fn keygen(config: &FileConfig, bits: Option<u64>, out_dir: &Path, seed: Option<u64>) -> Result<u8> {
    let bits = config.resolve(bits, "bits", 2048).map_err(usage)?;
    let mut rng = rng_from(seed);
    let (pk, sk) = paillier::keygen(bits, &mut rng)?;
    std::fs::create_dir_all(out_dir)?;
    let pub_path = out_dir.join("key.pub");
    let sec_path = out_dir.join("key.sec");
    paillier::save_public_key(&pk, &pub_path)?;
    paillier::save_private_key(&pk, &sk, &sec_path)?;
    println!("public key:  {}", pub_path.display());
    println!("private key: {}", sec_path.display());
    println!("modulus bits: {}", pk.bits());
    println!("fingerprint: {}", pk.fingerprint());
    Ok(EXIT_OK)
}

fn encrypt(
    config: &FileConfig,
    pubkey: &Path,
    image: &Path,
    frac_bits: Option<u32>,
    out: &Path,
    seed: Option<u64>,
) -> Result<u8> {
    let frac_bits = config
        .resolve(frac_bits, "frac_bits", DEFAULT_FRAC_BITS)
        .map_err(usage)?;
    let pk = paillier::load_public_key(pubkey)?;
    FixedPointParams::new(frac_bits, pk.n.clone())?;
    let img = read_pgm(image)?;
    let encoded = quantize_image(&img, frac_bits);
    let mut rng = rng_from(seed);
    let enc = encrypt_tensor(&pk, &encoded, &mut rng)?;
    enc.write_ctz(out, pk.ciphertext_byte_len())?;
    println!(
        "encrypted {} ({}) -> {} ({} bytes, fingerprint {})",
        image.display(),
        img.shape,
        out.display(),
        std::fs::metadata(out)?.len(),
        pk.fingerprint()
    );
    Ok(EXIT_OK)
}

fn decrypt(privkey: &Path, input: &Path, scale: Option<u32>, out: &Path) -> Result<u8> {
    let (pk, sk) = paillier::load_private_key(privkey)?;
    let mut tensor = CipherTensor::read_ctz(input)?;
    if tensor.key_id != pk.fingerprint() {
        return Err(Error::KeyMismatch(format!(
            "ciphertensor fingerprint {} does not match key {}",
            tensor.key_id,
            pk.fingerprint()
        )));
    }
    if let Some(s) = scale {
        tensor.scale = ScaleTag::new(s);
    }
    let ints = decrypt_tensor(&pk, &sk, &tensor)?;
    let img = dequantize_image(&ints);
    write_pgm(&img, out)?;
    println!(
        "decrypted {} -> {} (scale 2^-{})",
        input.display(),
        out.display(),
        tensor.scale.total_frac_bits
    );
    Ok(EXIT_OK)
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

#[allow(clippy::too_many_arguments)]
fn serve(
    config: &FileConfig,
    model: Option<PathBuf>,
    listen: &str,
    max_sessions: usize,
    min_key_bits: Option<u64>,
    perturb_bound: Option<u32>,
    seed: Option<u64>,
) -> Result<u8> {
    let model = model_or_demo(model)?;
    let min_key_bits = config
        .resolve(min_key_bits, "min_key_bits", 256)
        .map_err(usage)?;
    let perturb_bound = config
        .resolve(perturb_bound, "perturb_bound", 1u32 << 16)
        .map_err(usage)?;
    let frac_bits = config
        .resolve(None, "frac_bits", DEFAULT_FRAC_BITS)
        .map_err(usage)?;

    // refuse configurations that could overflow at the smallest key we accept
    let floor_n = num_bigint::BigUint::from(1u8) << min_key_bits;
    let params = FixedPointParams::new(frac_bits, floor_n)?;
    let budget = overflow_budget(&model, &params, 1.0)?;
    eprintln!(
        "model {} ok at {min_key_bits}-bit floor: output scale 2^-{}, worst magnitude {} bits",
        model.name,
        budget.max_frac_bits,
        budget.magnitude_bound.bits()
    );

    let mut cfg = ServerConfig::new(Arc::new(model));
    cfg.min_key_bits = min_key_bits;
    cfg.perturb_bound = perturb_bound;
    cfg.session_seed = seed;
    let cfg = Arc::new(cfg);

    let handler = on_signal as extern "C" fn(libc::c_int) as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
    let listener = TcpListener::bind(listen)?;
    eprintln!("listening on {listen} (max {max_sessions} concurrent sessions)");
    let shutdown = Arc::new(AtomicBool::new(false));
    let shutdown_poll = shutdown.clone();
    std::thread::spawn(move || loop {
        if SHUTDOWN.load(Ordering::SeqCst) {
            shutdown_poll.store(true, Ordering::SeqCst);
            return;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    });
    serve_blocking(listener, cfg, shutdown, max_sessions)?;
    eprintln!("shutdown complete");
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn denoise(
    config: &FileConfig,
    server: &str,
    privkey: &Path,
    pubkey: &Path,
    image: &Path,
    out: &Path,
    frac_bits: Option<u32>,
    linear: bool,
    seed: Option<u64>,
) -> Result<u8> {
    let frac_bits = config
        .resolve(frac_bits, "frac_bits", DEFAULT_FRAC_BITS)
        .map_err(usage)?;
    let (_, sk) = paillier::load_private_key(privkey)?;
    let pk = paillier::load_public_key(pubkey)?;
    let img = read_pgm(image)?;

    let stream = TcpStream::connect(server)?;
    let mut transport = TcpTransport::new(stream)?;
    let mut client = ClientSession::new(
        pk,
        sk,
        ClientConfig {
            version: if linear {
                PROTOCOL_VERSION_LINEAR
            } else {
                PROTOCOL_VERSION_NONLINEAR
            },
            frac_bits,
            model_name: String::new(),
            seed,
            record_act_features: false,
        },
    );
    let output = client.run(&img, &mut transport)?;
    let decoded = dequantize_image(&output);
    write_pgm(&decoded, out)?;
    println!("denoised {} -> {}", image.display(), out.display());
    println!("framework: {}", if linear { "linear" } else { "nonlinear" });
    println!("{}", format_metrics(client.metrics()));
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn verify(
    config: &FileConfig,
    model: Option<PathBuf>,
    image: Option<PathBuf>,
    bits: Option<u64>,
    seed: Option<u64>,
    seeds: u64,
    frac_bits: Option<u32>,
    corrupt_layer: Option<usize>,
) -> Result<u8> {
    let model = model_or_demo(model)?;
    let bits = config.resolve(bits, "bits", 512).map_err(usage)?;
    let frac_bits = config
        .resolve(frac_bits, "frac_bits", DEFAULT_FRAC_BITS)
        .map_err(usage)?;
    let base_seed = seed.unwrap_or(0);
    let img = match image {
        Some(path) => read_pgm(&path)?,
        None => generate_phantom(model.input_shape.height, base_seed),
    };
    if img.shape != model.input_shape {
        return Err(Error::Shape(format!(
            "image {} vs model input {}",
            img.shape, model.input_shape
        )));
    }

    let opts = VerifyOptions {
        bits,
        frac_bits,
        seed: base_seed,
        corrupt_weight_layer: corrupt_layer,
    };
    let reports = verify_seeds(&model, &img, &opts, base_seed..base_seed + seeds)?;
    let mut all_pass = true;
    for (seed, report) in &reports {
        let linear_ok = !model.is_linear() || report.act_round_trips == 0;
        let pass = report.pass && linear_ok;
        all_pass &= pass;
        println!(
            "seed {seed}: {} (act_round_trips={}, output scale 2^-{})",
            if pass { "PASS" } else { "FAIL" },
            report.act_round_trips,
            report.output_frac_bits
        );
        if let Some(m) = &report.first_mismatch {
            println!(
                "  first mismatch at layer {} element ({},{},{}): reference {} vs decrypted {}",
                m.layer, m.coords.0, m.coords.1, m.coords.2, m.expected, m.got
            );
        }
    }

    let drift = quantization_drift_per_layer(&model, &img, frac_bits)?;
    println!(
        "float-vs-fixed drift per layer: [{}]",
        drift
            .iter()
            .map(|d| format!("{d:.2e}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(if all_pass {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAILED
    })
}

#[allow(clippy::too_many_arguments)]
fn attack(
    config: &FileConfig,
    model: Option<PathBuf>,
    mode: &str,
    probes: Option<usize>,
    out_dir: &Path,
    seed: Option<u64>,
    fixed_m: bool,
    bits: Option<u64>,
    probe_size: usize,
    fit_images: usize,
    heldout_images: usize,
) -> Result<u8> {
    if !matches!(mode, "clean" | "perturbed" | "both") {
        return Err(usage(format!(
            "mode must be clean, perturbed, or both (got {mode})"
        )));
    }
    let model = model_or_demo(model)?;
    let cfg = AttackConfig {
        bits: config.resolve(bits, "bits", 256).map_err(usage)?,
        frac_bits: config
            .resolve(None, "frac_bits", DEFAULT_FRAC_BITS)
            .map_err(usage)?,
        seed: seed.unwrap_or(0),
        fit_images,
        heldout_images,
        probe_size,
        perturb_bound: config
            .resolve(None, "perturb_bound", 1u32 << 16)
            .map_err(usage)?,
        fixed_m,
        max_samples: probes,
    };
    let exp = run_attack_experiment(&model, &cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let report = serde_json::json!({
        "mode_requested": mode,
        "fixed_m": fixed_m,
        "clean": exp.clean,
        "perturbed": exp.perturbed,
        "random_baseline_psnr_db": exp.random_baseline_psnr_db,
    });
    let report_path = out_dir.join("report.json");
    std::fs::write(
        &report_path,
        serde_json::to_vec_pretty(&report).expect("report is plain data"),
    )?;

    // triptych normalized by the true panel's range
    let (lo, hi) = exp.triptych[0]
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo).max(1e-9);
    let names = [
        "true_output.pgm",
        "attack_clean.pgm",
        "attack_perturbed.pgm",
    ];
    for (panel, name) in exp.triptych.iter().zip(names) {
        let normalized = FloatTensor {
            shape: panel.shape,
            data: panel
                .data
                .iter()
                .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
                .collect(),
            scale: panel.scale,
        };
        write_pgm(&normalized, &out_dir.join(name))?;
    }

    for r in [&exp.clean, &exp.perturbed] {
        if mode == "both" || mode == r.mode {
            println!(
                "{}: weight_relative_error={:.3e} output_psnr={:.2}dB samples={}{}",
                r.mode,
                r.weight_relative_error,
                r.output_psnr_db,
                r.samples_used,
                if r.underdetermined {
                    " UNDERDETERMINED"
                } else {
                    ""
                }
            );
        }
    }
    println!(
        "random-weight baseline psnr: {:.2}dB",
        exp.random_baseline_psnr_db
    );
    println!("report: {}", report_path.display());
    Ok(EXIT_OK)
}

fn phantom(
    count: usize,
    size: usize,
    noise_sigma: f64,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<u8> {
    let base = seed.unwrap_or(0);
    std::fs::create_dir_all(out_dir)?;
    let mut noise_rng = ChaCha20Rng::seed_from_u64(base ^ 0x006e_6f69_7365);
    for i in 0..count {
        let clean = generate_phantom(size, base + i as u64);
        let noisy = add_noise(&clean, noise_sigma, &mut noise_rng);
        write_pgm(&clean, &out_dir.join(format!("clean_{i:04}.pgm")))?;
        write_pgm(&noisy, &out_dir.join(format!("noisy_{i:04}.pgm")))?;
    }
    println!(
        "wrote {count} phantom pairs ({size}x{size}, sigma {noise_sigma}) to {}",
        out_dir.display()
    );
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &FileConfig,
    out: &Path,
    count: usize,
    size: usize,
    noise_sigma: f64,
    epochs: usize,
    lr: f64,
    seed: Option<u64>,
    frac_bits: Option<u32>,
) -> Result<u8> {
    let frac_bits = config
        .resolve(frac_bits, "frac_bits", DEFAULT_FRAC_BITS)
        .map_err(usage)?;
    let seed = seed.unwrap_or(0);
    let pairs = phantom_pairs(count, size, noise_sigma, seed);
    let cfg = TrainConfig {
        epochs,
        learning_rate: lr,
        seed,
        frac_bits_weights: frac_bits,
    };
    let (model, losses) = train_demo(&pairs, &cfg)?;
    save_model(&model, out)?;

    // quick held-out sanity report
    let heldout = phantom_pairs(8, size, noise_sigma, seed.wrapping_add(50_000));
    let mut noisy_psnr = 0.0;
    let mut out_psnr = 0.0;
    for (noisy, clean) in &heldout {
        noisy_psnr += psnr(noisy, clean, 1.0);
        let denoised = cipherdenoise_core::model::infer_plain_float(&model, noisy)?;
        out_psnr += psnr(&denoised, clean, 1.0);
    }
    println!(
        "trained {} epochs on {} pairs: loss {:.3e} -> {:.3e}",
        epochs,
        count,
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "held-out psnr: noisy {:.2}dB, denoised {:.2}dB",
        noisy_psnr / heldout.len() as f64,
        out_psnr / heldout.len() as f64
    );
    println!("model written to {}", out.display());
    Ok(EXIT_OK)
}
