//! Black-box tests of the `cipherdenoise` binary: exit codes, file
//! artifacts, and the serve/denoise loop over a real socket.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cipherdenoise"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .env_remove("CIPHERDENOISE_CONFIG")
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn keygen_encrypt_decrypt_pgm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "1",
                "--size",
                "16",
                "--noise-sigma",
                "10",
                "--out-dir",
                "imgs",
                "--seed",
                "3",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "keygen",
                "--bits",
                "256",
                "--out-dir",
                "keys",
                "--seed",
                "1",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "encrypt",
                "--pubkey",
                "keys/key.pub",
                "--image",
                "imgs/noisy_0000.pgm",
                "--out",
                "x.ctz",
                "--seed",
                "2",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "decrypt",
                "--privkey",
                "keys/key.sec",
                "--in",
                "x.ctz",
                "--out",
                "back.pgm",
            ],
            d,
        ),
        0,
    );

    let original = std::fs::read(d.join("imgs/noisy_0000.pgm")).unwrap();
    let back = std::fs::read(d.join("back.pgm")).unwrap();
    assert_eq!(original, back, "16-bit samples are exact on the 2^-16 grid");

    // .ctz size: magic + header + elements x ciphertext width
    let meta = std::fs::metadata(d.join("x.ctz")).unwrap();
    assert_eq!(meta.len(), 88 + 256 * 64);
}

#[test]
fn wrong_key_is_refused_with_protocol_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "1",
                "--size",
                "8",
                "--out-dir",
                "imgs",
                "--seed",
                "3",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &["keygen", "--bits", "256", "--out-dir", "ka", "--seed", "1"],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &["keygen", "--bits", "256", "--out-dir", "kb", "--seed", "2"],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "encrypt",
                "--pubkey",
                "ka/key.pub",
                "--image",
                "imgs/clean_0000.pgm",
                "--out",
                "x.ctz",
                "--seed",
                "4",
            ],
            d,
        ),
        0,
    );
    let out = run(
        &[
            "decrypt",
            "--privkey",
            "kb/key.sec",
            "--in",
            "x.ctz",
            "--out",
            "nope.pgm",
        ],
        d,
    );
    assert_code(&out, 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn keygen_rejects_tiny_moduli() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["keygen", "--bits", "8", "--out-dir", "."], dir.path());
    assert_code(&out, 1);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["verify", "--definitely-not-a-flag"], dir.path());
    assert_code(&out, 1);
}

#[test]
fn verify_command_passes_and_fails_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // small model file so verification is quick
    let out = run(
        &[
            "train", "--out", "tiny.cdm", "--count", "6", "--size", "12", "--epochs", "2",
            "--seed", "1",
        ],
        d,
    );
    assert_code(&out, 0);

    let ok = run(
        &[
            "verify", "--model", "tiny.cdm", "--bits", "256", "--seed", "0", "--seeds", "2",
        ],
        d,
    );
    assert_code(&ok, 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert_eq!(text.matches("PASS").count(), 2, "{text}");

    // deliberate corruption fails with the verification exit code and names
    // the layer
    let bad = run(
        &[
            "verify",
            "--model",
            "tiny.cdm",
            "--bits",
            "256",
            "--seed",
            "0",
            "--corrupt-layer",
            "2",
        ],
        d,
    );
    assert_code(&bad, 2);
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.contains("FAIL") && text.contains("layer 2"), "{text}");

    // a linear-only model verifies with zero sign exchanges
    let linear = cipherdenoise_core::model::ModelSpec::demo_linear(
        cipherdenoise_core::tensor::Shape::new(1, 12, 12),
        16,
        4,
    );
    cipherdenoise_core::model::save_model(&linear, &d.join("linear.cdm")).unwrap();
    let out = run(
        &[
            "verify",
            "--model",
            "linear.cdm",
            "--bits",
            "256",
            "--seed",
            "0",
        ],
        d,
    );
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("PASS") && text.contains("act_round_trips=0"),
        "{text}"
    );
}

#[test]
fn attack_command_writes_report_and_triptych() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(
        &[
            "attack",
            "--out-dir",
            "atk",
            "--seed",
            "1",
            "--bits",
            "128",
            "--probe-size",
            "12",
            "--fit-images",
            "2",
            "--heldout-images",
            "3",
        ],
        d,
    );
    assert_code(&out, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("atk/report.json")).unwrap()).unwrap();
    assert!(report["clean"]["weight_relative_error"].as_f64().unwrap() < 1e-3);
    assert!(
        report["perturbed"]["weight_relative_error"]
            .as_f64()
            .unwrap()
            > 0.5
    );
    for img in [
        "true_output.pgm",
        "attack_clean.pgm",
        "attack_perturbed.pgm",
    ] {
        assert!(d.join("atk").join(img).exists(), "missing {img}");
    }

    // deterministic under --seed
    let rerun = run(
        &[
            "attack",
            "--out-dir",
            "atk2",
            "--seed",
            "1",
            "--bits",
            "128",
            "--probe-size",
            "12",
            "--fit-images",
            "2",
            "--heldout-images",
            "3",
        ],
        d,
    );
    assert_code(&rerun, 0);
    assert_eq!(
        std::fs::read(d.join("atk/report.json")).unwrap(),
        std::fs::read(d.join("atk2/report.json")).unwrap()
    );

    // a one-equation fit is reported as underdetermined
    let tiny = run(
        &[
            "attack",
            "--out-dir",
            "atk3",
            "--seed",
            "1",
            "--bits",
            "128",
            "--probe-size",
            "12",
            "--fit-images",
            "1",
            "--heldout-images",
            "2",
            "--probes",
            "1",
        ],
        d,
    );
    assert_code(&tiny, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("atk3/report.json")).unwrap()).unwrap();
    assert_eq!(report["clean"]["underdetermined"], serde_json::json!(true));
    assert_eq!(report["clean"]["samples_used"], serde_json::json!(1));
}

#[test]
fn phantom_corpus_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "2",
                "--size",
                "16",
                "--noise-sigma",
                "15",
                "--out-dir",
                "a",
                "--seed",
                "9",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "2",
                "--size",
                "16",
                "--noise-sigma",
                "15",
                "--out-dir",
                "b",
                "--seed",
                "9",
            ],
            d,
        ),
        0,
    );
    for name in [
        "clean_0000.pgm",
        "noisy_0000.pgm",
        "clean_0001.pgm",
        "noisy_0001.pgm",
    ] {
        assert_eq!(
            std::fs::read(d.join("a").join(name)).unwrap(),
            std::fs::read(d.join("b").join(name)).unwrap(),
            "{name} differs across identical seeds"
        );
    }
    // sigma 0 gives identical pairs
    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "1",
                "--size",
                "16",
                "--noise-sigma",
                "0",
                "--out-dir",
                "z",
                "--seed",
                "4",
            ],
            d,
        ),
        0,
    );
    assert_eq!(
        std::fs::read(d.join("z/clean_0000.pgm")).unwrap(),
        std::fs::read(d.join("z/noisy_0000.pgm")).unwrap()
    );
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("conf"), "bits=256\n# comment\n").unwrap();

    // config default applies (no --bits flag)
    let out = bin()
        .args(["keygen", "--out-dir", "cfg_keys", "--seed", "1"])
        .current_dir(d)
        .env("CIPHERDENOISE_CONFIG", d.join("conf"))
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("modulus bits: 256"));

    // explicit flag wins
    let out = bin()
        .args([
            "keygen",
            "--out-dir",
            "cfg_keys2",
            "--bits",
            "320",
            "--seed",
            "1",
        ])
        .current_dir(d)
        .env("CIPHERDENOISE_CONFIG", d.join("conf"))
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("modulus bits: 320"));
}

struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_and_denoise_match_the_local_verifier() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "1",
                "--size",
                "32",
                "--noise-sigma",
                "15",
                "--out-dir",
                "imgs",
                "--seed",
                "11",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "keygen",
                "--bits",
                "384",
                "--out-dir",
                "keys",
                "--seed",
                "12",
            ],
            d,
        ),
        0,
    );

    let port = 19_672;
    let addr = format!("127.0.0.1:{port}");
    let child = bin()
        .args(["serve", "--listen", &addr, "--max-sessions", "2"])
        .current_dir(d)
        .env_remove("CIPHERDENOISE_CONFIG")
        .stderr(Stdio::piped())
        .spawn()
        .expect("server starts");
    let mut guard = ChildGuard(child);
    std::thread::sleep(std::time::Duration::from_millis(400));

    let out = run(
        &[
            "denoise",
            "--server",
            &addr,
            "--privkey",
            "keys/key.sec",
            "--pubkey",
            "keys/key.pub",
            "--image",
            "imgs/noisy_0000.pgm",
            "--out",
            "denoised.pgm",
            "--seed",
            "13",
        ],
        d,
    );
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("act_round_trips=2"), "{stdout}");

    // the denoised image must round-trip through the independent local
    // verification path: decrypted session output == fixed-point reference,
    // so re-running the reference and writing it as PGM gives the same bytes
    let reference = reference_pgm(d, "imgs/noisy_0000.pgm");
    assert_eq!(
        std::fs::read(d.join("denoised.pgm")).unwrap(),
        reference,
        "server output differs from the reference pipeline"
    );

    // server logged matching counters
    drop_server_and_check_log(&mut guard, &stdout);
}

#[test]
fn trained_model_denoises_better_than_noise_over_the_wire() {
    use cipherdenoise_core::pgm::read_pgm;
    use cipherdenoise_core::phantom::psnr;

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    assert_code(
        &run(
            &[
                "train",
                "--out",
                "denoiser.cdm",
                "--count",
                "48",
                "--size",
                "16",
                "--noise-sigma",
                "20",
                "--epochs",
                "60",
                "--seed",
                "11",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "phantom",
                "--count",
                "1",
                "--size",
                "16",
                "--noise-sigma",
                "20",
                "--out-dir",
                "imgs",
                "--seed",
                "700",
            ],
            d,
        ),
        0,
    );
    assert_code(
        &run(
            &[
                "keygen",
                "--bits",
                "256",
                "--out-dir",
                "keys",
                "--seed",
                "15",
            ],
            d,
        ),
        0,
    );

    let addr = "127.0.0.1:19673";
    let child = bin()
        .args([
            "serve",
            "--listen",
            addr,
            "--model",
            "denoiser.cdm",
            "--min-key-bits",
            "128",
        ])
        .current_dir(d)
        .env_remove("CIPHERDENOISE_CONFIG")
        .stderr(Stdio::piped())
        .spawn()
        .expect("server starts");
    let _guard = ChildGuard(child);
    std::thread::sleep(std::time::Duration::from_millis(400));

    let out = run(
        &[
            "denoise",
            "--server",
            addr,
            "--privkey",
            "keys/key.sec",
            "--pubkey",
            "keys/key.pub",
            "--image",
            "imgs/noisy_0000.pgm",
            "--out",
            "denoised.pgm",
            "--seed",
            "16",
        ],
        d,
    );
    assert_code(&out, 0);

    let clean = read_pgm(&d.join("imgs/clean_0000.pgm")).unwrap();
    let noisy = read_pgm(&d.join("imgs/noisy_0000.pgm")).unwrap();
    let denoised = read_pgm(&d.join("denoised.pgm")).unwrap();
    let noisy_db = psnr(&noisy, &clean, 1.0);
    let denoised_db = psnr(&denoised, &clean, 1.0);
    assert!(
        denoised_db > noisy_db,
        "server denoising must beat the noisy input: {denoised_db:.2} vs {noisy_db:.2} dB"
    );
}

fn drop_server_and_check_log(guard: &mut ChildGuard, client_stdout: &str) {
    let _ = guard.0.kill();
    let mut stderr = String::new();
    if let Some(mut pipe) = guard.0.stderr.take() {
        use std::io::Read;
        let _ = pipe.read_to_string(&mut stderr);
    }
    let up = extract(client_stdout, "upload_bytes=");
    let down = extract(client_stdout, "download_bytes=");
    assert!(
        stderr.contains(&format!("up_bytes={up}"))
            && stderr.contains(&format!("down_bytes={down}")),
        "server log does not match client counters:\n{stderr}"
    );
}

fn extract(text: &str, key: &str) -> String {
    let start = text.find(key).expect(key) + key.len();
    text[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect()
}

/// Run the fixed-point reference on the demo model via the library and write
/// it the way `decrypt` would.
fn reference_pgm(dir: &Path, image: &str) -> Vec<u8> {
    use cipherdenoise_core::model::{
        dequantize_image, infer_plain_fixed, quantize_image, ModelSpec,
    };
    use cipherdenoise_core::pgm::{read_pgm, write_pgm};
    use cipherdenoise_core::tensor::Shape;

    let img = read_pgm(&dir.join(image)).unwrap();
    let model = ModelSpec::demo(Shape::new(1, 32, 32), 16, 0);
    let out = infer_plain_fixed(
        &model.quantize(16).unwrap(),
        &quantize_image(&img, 16),
        None,
    )
    .unwrap();
    let decoded = dequantize_image(&out);
    let path: PathBuf = dir.join("reference.pgm");
    write_pgm(&decoded, &path).unwrap();
    std::fs::read(path).unwrap()
}
