//! Model-stealing experiment: least-squares weight recovery from observed
//! intermediate features, with and without the perturbance defense.
//!
//! The attacker is a malicious client. It chooses its own probe images, runs
//! ordinary protocol sessions, and keeps the decrypted sign-exchange payloads
//! (the only mid-session plaintext the protocol ever hands it). Each spatial
//! position of an observed feature map yields one linear equation relating a
//! known input patch to an observed response; ordinary least squares on the
//! patch matrix recovers the first convolution's weights when the responses
//! are the true features, and collapses when every response is scaled by an
//! unknown nonzero multiplier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::model::{dequantize_image, LayerDesc, ModelSpec};
use crate::phantom::{generate_phantom, psnr};
use crate::protocol::{LocalSessionSetup, PerturbPolicy, PROTOCOL_VERSION_NONLINEAR};
use crate::tensor::{bias_add_plain, conv2d_plain, ConvWeights, FloatTensor, PlainTensor, Shape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn unknowns_per_channel(&self) -> usize {
        self.in_channels * self.kernel * self.kernel + 1
    }
}

/// Weight estimate in the same layout as [`ConvWeights`] plus per-channel
/// bias.
#[derive(Debug, Clone)]
pub struct StolenConv {
    pub geometry: ConvGeometry,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub target_layer: usize,
    /// Observation equations per output channel consumed by the fit.
    pub samples_used: usize,
    /// Frobenius relative error of [weights; bias] against ground truth.
    pub weight_relative_error: f64,
    /// PSNR of the reconstructed layer output on held-out probes.
    pub output_psnr_db: f64,
    pub mode: String,
    pub underdetermined: bool,
}

/// Recover a convolution from aligned (input image, pre-activation feature)
/// pairs. `max_samples` caps the observation equations used per output
/// channel; fewer equations than unknowns is reported, not fatal.
pub fn steal_conv_layer(
    probe_inputs: &[FloatTensor],
    observations: &[FloatTensor],
    geometry: &ConvGeometry,
    max_samples: Option<usize>,
) -> Result<(StolenConv, usize, bool)> {
    if probe_inputs.len() != observations.len() {
        return Err(Error::Shape(format!(
            "{} probes vs {} observations",
            probe_inputs.len(),
            observations.len()
        )));
    }
    let unknowns = geometry.unknowns_per_channel();
    let k = geometry.kernel;

    // design rows (shared across output channels) and per-channel responses
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut responses: Vec<Vec<f64>> = vec![Vec::new(); geometry.out_channels];
    'collect: for (input, obs) in probe_inputs.iter().zip(observations) {
        if obs.shape.channels != geometry.out_channels {
            return Err(Error::Shape(format!(
                "observation has {} channels, expected {}",
                obs.shape.channels, geometry.out_channels
            )));
        }
        for oy in 0..obs.shape.height {
            for ox in 0..obs.shape.width {
                if let Some(cap) = max_samples {
                    if rows.len() >= cap {
                        break 'collect;
                    }
                }
                let mut row = Vec::with_capacity(unknowns);
                for ic in 0..geometry.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y =
                                (oy * geometry.stride + ky) as isize - geometry.padding as isize;
                            let x =
                                (ox * geometry.stride + kx) as isize - geometry.padding as isize;
                            if y < 0
                                || y >= input.shape.height as isize
                                || x < 0
                                || x >= input.shape.width as isize
                            {
                                row.push(0.0);
                            } else {
                                row.push(*input.get(ic, y as usize, x as usize));
                            }
                        }
                    }
                }
                row.push(1.0); // bias column
                rows.push(row);
                for (oc, channel) in responses.iter_mut().enumerate() {
                    channel.push(*obs.get(oc, oy, ox));
                }
            }
        }
    }

    let samples = rows.len();
    let mut underdetermined = samples < unknowns;
    let mut weight = vec![0.0; geometry.out_channels * unknowns.saturating_sub(1)];
    let mut bias = vec![0.0; geometry.out_channels];
    if !underdetermined {
        for oc in 0..geometry.out_channels {
            match least_squares(&rows, &responses[oc]) {
                Some(solution) => {
                    let (w, b) = solution.split_at(unknowns - 1);
                    weight[oc * (unknowns - 1)..(oc + 1) * (unknowns - 1)].copy_from_slice(w);
                    bias[oc] = b[0];
                }
                None => {
                    underdetermined = true;
                }
            }
        }
    }
    Ok((
        StolenConv {
            geometry: *geometry,
            weight,
            bias,
        },
        samples,
        underdetermined,
    ))
}

/// Ordinary least squares via normal equations with partial-pivot Gaussian
/// elimination. `None` when the normal matrix is singular (rank-deficient
/// design).
#[allow(clippy::needless_range_loop)]
pub fn least_squares(rows: &[Vec<f64>], responses: &[f64]) -> Option<Vec<f64>> {
    let n = rows.first()?.len();
    let mut ata = vec![vec![0.0f64; n]; n];
    let mut atb = vec![0.0f64; n];
    for (row, &y) in rows.iter().zip(responses) {
        for i in 0..n {
            atb[i] += row[i] * y;
            for j in i..n {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            ata[i][j] = ata[j][i];
        }
    }
    // scale-aware singularity threshold
    let max_diag = ata
        .iter()
        .enumerate()
        .map(|(i, r)| r[i].abs())
        .fold(0.0, f64::max);
    let eps = max_diag.max(1e-300) * 1e-12;

    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| {
            ata[a][col]
                .abs()
                .partial_cmp(&ata[b][col].abs())
                .expect("no NaN in normal matrix")
        })?;
        if ata[pivot][col].abs() < eps {
            return None;
        }
        ata.swap(col, pivot);
        atb.swap(col, pivot);
        for r in col + 1..n {
            let f = ata[r][col] / ata[col][col];
            for c in col..n {
                ata[r][c] -= f * ata[col][c];
            }
            atb[r] -= f * atb[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = atb[i];
        for j in i + 1..n {
            acc -= ata[i][j] * x[j];
        }
        x[i] = acc / ata[i][i];
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// End-to-end experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub bits: u64,
    pub frac_bits: u32,
    pub seed: u64,
    /// Probe images pushed through real sessions for the fit.
    pub fit_images: usize,
    /// Fresh probes for the reconstruction PSNR.
    pub heldout_images: usize,
    pub probe_size: usize,
    pub perturb_bound: u32,
    /// Reuse one perturbance matrix across all probe sessions (the most
    /// attacker-friendly configuration) instead of fresh randomness per
    /// session.
    pub fixed_m: bool,
    /// Cap on observation equations per output channel.
    pub max_samples: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            bits: 256,
            frac_bits: 16,
            seed: 0,
            fit_images: 4,
            heldout_images: 16,
            probe_size: 16,
            perturb_bound: crate::protocol::activation::DEFAULT_PERTURB_BOUND,
            fixed_m: false,
            max_samples: None,
        }
    }
}

pub struct AttackExperiment {
    pub clean: AttackReport,
    pub perturbed: AttackReport,
    /// PSNR a random-weight guess achieves, for context in the report.
    pub random_baseline_psnr_db: f64,
    /// Held-out probe reconstructions: (true output, clean-attack output,
    /// perturbed-attack output), channel 0.
    pub triptych: [FloatTensor; 3],
}

/// Run the clean-vs-perturbed attack end to end through the protocol stack.
///
/// Clean mode is the counterfactual where the client sees true features
/// (perturbation disabled server-side); perturbed mode is normal operation.
pub fn run_attack_experiment(model: &ModelSpec, cfg: &AttackConfig) -> Result<AttackExperiment> {
    let (geometry, true_weight, true_bias) = target_geometry(model)?;

    let probes: Vec<FloatTensor> = (0..cfg.fit_images)
        .map(|i| generate_phantom(cfg.probe_size, cfg.seed.wrapping_add(1000 + i as u64)))
        .collect();
    let heldout: Vec<FloatTensor> = (0..cfg.heldout_images)
        .map(|i| generate_phantom(cfg.probe_size, cfg.seed.wrapping_add(9000 + i as u64)))
        .collect();

    // probe geometry must match the model input
    let probe_shape = Shape::new(model.input_shape.channels, cfg.probe_size, cfg.probe_size);
    let probe_model = resize_model(model, probe_shape)?;

    let perturbed_policy = if cfg.fixed_m {
        PerturbPolicy::FixedSeed(cfg.seed ^ 0x4d5f_4649_5845)
    } else {
        PerturbPolicy::Fresh
    };

    let run_mode = |policy: PerturbPolicy, mode: &str| -> Result<(StolenConv, AttackReport)> {
        let mut observations = Vec::with_capacity(probes.len());
        for (i, probe) in probes.iter().enumerate() {
            let mut setup = LocalSessionSetup::new(probe_model.clone());
            setup.bits = cfg.bits;
            setup.frac_bits = cfg.frac_bits;
            setup.seed = cfg.seed.wrapping_add(77 + i as u64);
            setup.version = PROTOCOL_VERSION_NONLINEAR;
            setup.record_act_features = true;
            setup.perturb_policy = policy.clone();
            let outcome = setup.run(probe)?;
            let (_, feature) = outcome
                .recorded_act_features
                .into_iter()
                .next()
                .ok_or_else(|| Error::Shape("model exposed no sign exchange".into()))?;
            observations.push(dequantize_image(&feature));
        }
        let (stolen, samples, underdetermined) =
            steal_conv_layer(&probes, &observations, &geometry, cfg.max_samples)?;
        let rel_err = relative_error(&stolen.weight, &stolen.bias, &true_weight, &true_bias);
        let psnr_db = reconstruction_psnr(&heldout, &stolen, &true_weight, &true_bias)?;
        Ok((
            stolen,
            AttackReport {
                target_layer: 0,
                samples_used: samples,
                weight_relative_error: rel_err,
                output_psnr_db: psnr_db,
                mode: mode.to_string(),
                underdetermined,
            },
        ))
    };

    let (clean_stolen, clean) = run_mode(PerturbPolicy::Identity, "clean")?;
    let (pert_stolen, perturbed) = run_mode(perturbed_policy, "perturbed")?;

    // a random-weight guess of the same shape, for scale
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(31337));
    let random_guess = StolenConv {
        geometry,
        weight: (0..true_weight.len())
            .map(|_| rng.gen_range(-0.3..0.3))
            .collect(),
        bias: (0..true_bias.len())
            .map(|_| rng.gen_range(-0.05..0.05))
            .collect(),
    };
    let random_baseline_psnr_db =
        reconstruction_psnr(&heldout, &random_guess, &true_weight, &true_bias)?;

    let sample = &heldout[0];
    let truth = apply_conv(sample, &geometry, &true_weight, &true_bias)?;
    let clean_img = apply_conv(sample, &geometry, &clean_stolen.weight, &clean_stolen.bias)?;
    let pert_img = apply_conv(sample, &geometry, &pert_stolen.weight, &pert_stolen.bias)?;

    Ok(AttackExperiment {
        clean,
        perturbed,
        random_baseline_psnr_db,
        triptych: [
            channel_zero(&truth),
            channel_zero(&clean_img),
            channel_zero(&pert_img),
        ],
    })
}

/// The attack targets the first layer, which must be a convolution followed
/// by an activation (so its pre-activation output surfaces in the first sign
/// exchange).
fn target_geometry(model: &ModelSpec) -> Result<(ConvGeometry, Vec<f64>, Vec<f64>)> {
    match (model.layers.first(), model.layers.get(1)) {
        (
            Some(LayerDesc::Conv {
                out_channels,
                in_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            }),
            Some(l1),
        ) if l1.is_activation() => Ok((
            ConvGeometry {
                out_channels: *out_channels,
                in_channels: *in_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            },
            weight.iter().map(|&w| f64::from(w)).collect(),
            bias.iter().map(|&b| f64::from(b)).collect(),
        )),
        _ => Err(Error::Shape(
            "attack experiment expects a convolution followed by an activation".into(),
        )),
    }
}

/// Same layers, different spatial input size (the architecture is size
/// agnostic as long as shapes stay consistent).
fn resize_model(model: &ModelSpec, input: Shape) -> Result<ModelSpec> {
    ModelSpec::new(
        model.name.clone(),
        input,
        model.frac_bits_weights,
        model.layers.clone(),
    )
}

fn relative_error(est_w: &[f64], est_b: &[f64], true_w: &[f64], true_b: &[f64]) -> f64 {
    let num: f64 = est_w
        .iter()
        .zip(true_w)
        .chain(est_b.iter().zip(true_b))
        .map(|(e, t)| (e - t) * (e - t))
        .sum();
    let den: f64 = true_w.iter().chain(true_b).map(|t| t * t).sum();
    (num / den.max(1e-300)).sqrt()
}

fn apply_conv(
    input: &FloatTensor,
    geometry: &ConvGeometry,
    weight: &[f64],
    bias: &[f64],
) -> Result<FloatTensor> {
    let w = ConvWeights::new(
        geometry.out_channels,
        geometry.in_channels,
        geometry.kernel,
        weight.to_vec(),
    )?;
    let out = conv2d_plain(input, &w, geometry.stride, geometry.padding, 0)?;
    let bias_tensor = PlainTensor::new(Shape::new(bias.len(), 1, 1), bias.to_vec(), out.scale)?;
    bias_add_plain(&out, &bias_tensor)
}

/// PSNR of the estimated layer output against the true one, aggregated over
/// the held-out probes, with the peak taken from the true outputs' range.
fn reconstruction_psnr(
    heldout: &[FloatTensor],
    stolen: &StolenConv,
    true_w: &[f64],
    true_b: &[f64],
) -> Result<f64> {
    let mut truth_all = Vec::new();
    let mut est_all = Vec::new();
    for probe in heldout {
        let truth = apply_conv(probe, &stolen.geometry, true_w, true_b)?;
        let est = apply_conv(probe, &stolen.geometry, &stolen.weight, &stolen.bias)?;
        truth_all.extend(truth.data);
        est_all.extend(est.data);
    }
    let peak = truth_all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let peak = (peak.1 - peak.0).max(1e-9);
    let shape = Shape::new(1, 1, truth_all.len());
    let a = PlainTensor::new(shape, truth_all, Default::default())?;
    let b = PlainTensor::new(shape, est_all, Default::default())?;
    Ok(psnr(&a, &b, peak))
}

fn channel_zero(t: &FloatTensor) -> FloatTensor {
    FloatTensor::from_fn(Shape::new(1, t.shape.height, t.shape.width), |_, y, x| {
        *t.get(0, y, x)
    })
}
