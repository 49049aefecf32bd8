//! Synthetic ellipse phantoms and image-domain low-dose noise.
//!
//! Stand-in corpus for real CT slices: a soft-tissue body ellipse with a few
//! internal structures, plus a noise model of Poisson photon thinning and
//! additive Gaussian electronic noise applied in the image domain. `sigma` is
//! on the conventional 0-255 scale; sigma 0 means a bit-identical copy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::tensor::{FloatTensor, Shape};

const MAX_PIXEL: f64 = 65535.0 / 65536.0;

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    delta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Deterministic random-ellipse phantom in [0, 1).
pub fn generate_phantom(size: usize, seed: u64) -> FloatTensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut ellipses = vec![Ellipse {
        cy: s * 0.5,
        cx: s * 0.5,
        ry: s * rng.gen_range(0.32..0.45),
        rx: s * rng.gen_range(0.32..0.45),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        delta: rng.gen_range(0.18..0.28),
    }];
    let body = &ellipses[0];
    let (body_cy, body_cx, body_r) = (body.cy, body.cx, body.ry.min(body.rx));
    let count = rng.gen_range(3..=7);
    for _ in 0..count {
        let rad = rng.gen_range(0.0..0.6) * body_r;
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        ellipses.push(Ellipse {
            cy: body_cy + rad * theta.sin(),
            cx: body_cx + rad * theta.cos(),
            ry: s * rng.gen_range(0.04..0.18),
            rx: s * rng.gen_range(0.04..0.18),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            delta: rng.gen_range(-0.12..0.45),
        });
    }

    FloatTensor::from_fn(Shape::new(1, size, size), |_, y, x| {
        let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = 0.0;
        for e in &ellipses {
            if e.contains(yf, xf) {
                v += e.delta;
            }
        }
        v.clamp(0.0, MAX_PIXEL)
    })
}

/// Apply Poisson thinning plus additive Gaussian noise. `sigma` on the 0-255
/// scale; 0 returns the input unchanged.
pub fn add_noise(image: &FloatTensor, sigma: f64, rng: &mut ChaCha20Rng) -> FloatTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    // photon budget chosen so Poisson noise at mid-intensity is comparable to
    // the Gaussian term
    let photons = (255.0 / sigma).powi(2).max(1.0);
    let gauss = Normal::new(0.0, sigma / 255.0).expect("valid sigma");
    let data = image
        .data
        .iter()
        .map(|&v| {
            let mean = (v * photons).max(1e-9);
            let thinned = Poisson::new(mean).expect("positive mean").sample(rng) / photons;
            (thinned + gauss.sample(rng)).clamp(0.0, MAX_PIXEL)
        })
        .collect();
    FloatTensor {
        shape: image.shape,
        data,
        scale: image.scale,
    }
}

/// Peak signal-to-noise ratio in dB with an explicit peak value.
pub fn psnr(a: &FloatTensor, b: &FloatTensor, peak: f64) -> f64 {
    assert_eq!(a.shape, b.shape, "psnr over mismatched shapes");
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}
