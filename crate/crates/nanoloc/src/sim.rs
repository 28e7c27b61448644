//! Synthetic z-stacks of point-like nanoparticles.
//!
//! The forward model is separable: an axial brightness envelope (a skewed
//! Gaussian, matching the slightly asymmetric profile a real objective with
//! residual spherical aberration produces) times a defocus-widened lateral
//! Gaussian spot. The lateral spot is integrated exactly over each pixel and
//! normalized to unit total flux, so the integrated frame brightness tracks
//! the axial envelope alone. Stage-encoder jitter perturbs the depth at which
//! a frame is physically rendered while the recorded `z_stage` stays on the
//! nominal grid; additive Gaussian sensor noise is applied per pixel.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{child_seed, OpticalConfig};
use crate::error::{Error, Result};

/// Ground-truth position of one simulated particle. The real experiment has
/// no such record; it exists so that estimator tests have an oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleTruth {
    pub id: u64,
    pub x_nm: f64,
    pub y_nm: f64,
    pub z_true_nm: f64,
}

impl ParticleTruth {
    pub fn validate(&self) -> Result<()> {
        if self.x_nm.is_finite() && self.y_nm.is_finite() && self.z_true_nm.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteCoordinates { id: self.id })
        }
    }
}

/// One camera crop at a known nominal stage depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Row-major brightness values, `pixels[[row_y, col_x]]`.
    pub pixels: Array2<f64>,
    /// Nominal (encoder-reported) stage coordinate; the value the pipeline
    /// sees downstream.
    pub z_stage_nm: f64,
    /// Physical depth the frame was rendered at: nominal plus encoder jitter.
    pub z_actual_nm: f64,
}

impl Frame {
    pub fn crop_px(&self) -> usize {
        self.pixels.nrows()
    }

    /// Mean brightness over the pixels whose centers lie within `radius_px`
    /// of the crop center.
    pub fn disk_mean(&self, radius_px: f64) -> f64 {
        let n = self.crop_px();
        let c = n as f64 / 2.0;
        let r2 = radius_px * radius_px;
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in 0..n {
            let dy = row as f64 + 0.5 - c;
            for col in 0..n {
                let dx = col as f64 + 0.5 - c;
                if dx * dx + dy * dy <= r2 {
                    sum += self.pixels[[row, col]];
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    /// Mean and sample standard deviation of the border ring of the crop,
    /// used as a local background and noise estimate.
    pub fn border_ring_stats(&self, width_px: usize) -> (f64, f64) {
        let n = self.crop_px();
        let w = width_px.min(n / 2);
        let mut values = Vec::new();
        for row in 0..n {
            for col in 0..n {
                if row < w || row >= n - w || col < w || col >= n - w {
                    values.push(self.pixels[[row, col]]);
                }
            }
        }
        (crate::stats::mean(&values), crate::stats::sample_std(&values))
    }

    /// Integrated brightness above a constant background level.
    pub fn integrated_signal(&self, background: f64) -> f64 {
        self.pixels.iter().map(|p| p - background).sum()
    }
}

/// Ordered frames of one particle across depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ZStack {
    pub particle: ParticleTruth,
    pub frames: Vec<Frame>,
    pub z_step_nm: f64,
    /// False when the particle sits too close to a scan edge (closer than
    /// two steps) for the brightness profile to be sampled on both sides.
    pub usable: bool,
}

impl ZStack {
    /// Number of frames whose central-disk mean exceeds
    /// `background + 3 * sensor_noise_rms`.
    pub fn bright_frame_count(&self, cfg: &OpticalConfig) -> usize {
        self.frames
            .iter()
            .filter(|f| f.disk_mean(DETECTION_DISK_RADIUS_PX) > cfg.background + 3.0 * cfg.sensor_noise_rms)
            .count()
    }
}

/// Photometry aperture radius, in pixels, shared by detection and the
/// brightness measurements downstream.
pub const DETECTION_DISK_RADIUS_PX: f64 = 5.0;

/// Width of the border ring used for local background estimation.
pub const BORDER_RING_PX: usize = 2;

fn envelope_raw(u: f64, asymmetry: f64) -> f64 {
    (-0.5 * u * u).exp() * (1.0 + asymmetry * libm::erf(u / std::f64::consts::SQRT_2))
}

/// Mode of the raw envelope in units of `axial_sigma`, located by ternary
/// search (the family is unimodal for |asymmetry| <= 1).
fn envelope_mode(asymmetry: f64) -> f64 {
    let (mut lo, mut hi) = (-2.0f64, 2.0f64);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if envelope_raw(m1, asymmetry) < envelope_raw(m2, asymmetry) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    0.5 * (lo + hi)
}

/// Axial brightness envelope at defocus `dz_nm`, normalized to peak 1 at its
/// mode. Symmetric in `dz` when `asymmetry` is zero.
pub fn axial_envelope(dz_nm: f64, cfg: &OpticalConfig) -> f64 {
    let u = dz_nm / cfg.axial_sigma_nm;
    let peak = envelope_raw(envelope_mode(cfg.asymmetry), cfg.asymmetry);
    (envelope_raw(u, cfg.asymmetry) / peak).clamp(0.0, 1.0)
}

/// Defocus-dependent lateral spot width.
pub fn lateral_sigma(dz_nm: f64, cfg: &OpticalConfig) -> f64 {
    let u = dz_nm / cfg.axial_sigma_nm;
    cfg.lateral_sigma0_nm * (1.0 + cfg.lateral_growth * u * u).sqrt()
}

/// Fraction of the lateral spot's flux collected by each pixel row/column:
/// the 1D Gaussian CDF difference across the pixel edges.
fn pixel_fractions(crop_px: usize, pixel_size_nm: f64, center_nm: f64, sigma_nm: f64) -> Vec<f64> {
    let inv = 1.0 / (sigma_nm * std::f64::consts::SQRT_2);
    let mut edges = Vec::with_capacity(crop_px + 1);
    for i in 0..=crop_px {
        edges.push(libm::erf((i as f64 * pixel_size_nm - center_nm) * inv));
    }
    (0..crop_px).map(|i| 0.5 * (edges[i + 1] - edges[i])).collect()
}

/// Render one frame of a particle at nominal stage depth `z_stage_nm`.
///
/// Deterministic given identical inputs and seed. The first draw from the
/// seeded stream is the encoder jitter, then per-pixel sensor noise in
/// row-major order.
pub fn render_frame(
    particle: &ParticleTruth,
    z_stage_nm: f64,
    cfg: &OpticalConfig,
    seed: u64,
) -> Result<Frame> {
    cfg.validate()?;
    particle.validate()?;
    if !z_stage_nm.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "non-finite z_stage {z_stage_nm}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let z_actual_nm = z_stage_nm + cfg.encoder_sigma_nm * unit_normal.sample(&mut rng);
    let dz = z_actual_nm - particle.z_true_nm;
    let flux = cfg.peak_brightness * axial_envelope(dz, cfg);
    let sigma = lateral_sigma(dz, cfg);

    let n = cfg.crop_px as usize;
    let fx = pixel_fractions(n, cfg.pixel_size_nm, particle.x_nm, sigma);
    let fy = pixel_fractions(n, cfg.pixel_size_nm, particle.y_nm, sigma);

    let mut pixels = Array2::from_elem((n, n), cfg.background);
    for row in 0..n {
        let fyv = fy[row];
        for col in 0..n {
            pixels[[row, col]] += flux * fyv * fx[col];
        }
    }
    if cfg.sensor_noise_rms > 0.0 {
        for p in pixels.iter_mut() {
            *p += cfg.sensor_noise_rms * unit_normal.sample(&mut rng);
        }
    }

    Ok(Frame {
        pixels,
        z_stage_nm,
        z_actual_nm,
    })
}

/// Scan a particle from `z_min_nm` to `z_max_nm` in steps of `cfg.z_step_nm`.
///
/// A particle whose `z_true` lies closer than two steps to either scan edge
/// is still rendered but the stack is marked unusable.
pub fn simulate_stack(
    particle: &ParticleTruth,
    z_min_nm: f64,
    z_max_nm: f64,
    cfg: &OpticalConfig,
    seed: u64,
) -> Result<ZStack> {
    cfg.validate()?;
    particle.validate()?;
    let span = z_max_nm - z_min_nm;
    if span < 2.0 * cfg.z_step_nm {
        return Err(Error::RangeTooSmall {
            span,
            min_span: 2.0 * cfg.z_step_nm,
        });
    }

    let n_frames = (span / cfg.z_step_nm).floor() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let z = z_min_nm + k as f64 * cfg.z_step_nm;
        frames.push(render_frame(particle, z, cfg, child_seed(seed, k as u64))?);
    }

    let margin = 2.0 * cfg.z_step_nm;
    let usable = particle.z_true_nm >= z_min_nm + margin
        && particle.z_true_nm <= z_max_nm - margin;

    Ok(ZStack {
        particle: *particle,
        frames,
        z_step_nm: cfg.z_step_nm,
        usable,
    })
}
