//! Reference axial coordinates from z-stack photometry.
//!
//! Each particle's reference depth is the brightness-weighted centroid of its
//! per-frame brightness series, with an uncertainty that propagates the stage
//! encoder accuracy and the camera noise. The module also fits the mean
//! brightness profile of a stack corpus with a Gaussian, which is the
//! single-focal-plane accuracy baseline the dual-plane network is compared
//! against.

use serde::{Deserialize, Serialize};

use crate::config::OpticalConfig;
use crate::error::{Error, Result};
use crate::gaussfit::{fit_gaussian, FitOptions, GaussianFit};
use crate::sim::{ZStack, BORDER_RING_PX, DETECTION_DISK_RADIUS_PX};

/// Per-frame mean brightness of one particle, background subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct BrightnessSeries {
    pub particle_id: u64,
    /// `(z_nm, brightness)` for consecutive detected frames, z strictly increasing.
    pub entries: Vec<(f64, f64)>,
}

impl BrightnessSeries {
    /// Validating constructor: at least three consecutive entries, strictly
    /// increasing z, strictly positive brightness.
    pub fn new(particle_id: u64, entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.len() < 3 {
            return Err(Error::FewerThanThreeFrames {
                id: particle_id,
                len: entries.len(),
            });
        }
        for pair in entries.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidConfig(
                    "brightness series z values must be strictly increasing".into(),
                ));
            }
        }
        if entries.iter().any(|&(_, b)| b <= 0.0) {
            return Err(Error::ZeroWeightSum {
                sum: entries.iter().map(|&(_, b)| b).filter(|b| *b <= 0.0).sum(),
            });
        }
        Ok(BrightnessSeries {
            particle_id,
            entries,
        })
    }

    /// Construct without validation; unit tests use this to probe degenerate
    /// series the pipeline itself never builds.
    pub fn new_unchecked(particle_id: u64, entries: Vec<(f64, f64)>) -> Self {
        BrightnessSeries {
            particle_id,
            entries,
        }
    }
}

/// Reference axial coordinate of one particle and its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceZ {
    pub particle_id: u64,
    pub z_bar_nm: f64,
    pub sigma_zbar_nm: f64,
    pub n_frames: usize,
}

/// Instrument error constants entering the uncertainty propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConstants {
    /// Vertical stage linear encoder accuracy.
    pub sigma_z_im_nm: f64,
    /// RMS pixel brightness variation of the camera.
    pub sigma_b_im: f64,
}

impl Default for NoiseConstants {
    fn default() -> Self {
        NoiseConstants {
            sigma_z_im_nm: 35.0,
            sigma_b_im: 0.73,
        }
    }
}

impl NoiseConstants {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_z_im_nm > 0.0 && self.sigma_b_im > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "noise constants must be positive".into(),
            ))
        }
    }
}

/// Default detection threshold: three times the border-ring noise level.
pub fn default_detection_threshold(cfg: &OpticalConfig) -> f64 {
    3.0 * cfg.sensor_noise_rms
}

/// Per-frame aperture photometry of a stack.
///
/// Brightness is the mean over a fixed central disk minus the local
/// background estimated from the crop border ring. A frame counts as
/// detected when the background-subtracted mean exceeds the threshold; the
/// series is the longest consecutive detected run (ties resolved toward the
/// brightest frame).
pub fn measure_brightness(stack: &ZStack, detection_threshold: f64) -> Result<BrightnessSeries> {
    let id = stack.particle.id;
    let threshold = detection_threshold.max(0.0);

    let mut measured: Vec<(f64, f64)> = Vec::with_capacity(stack.frames.len());
    for frame in &stack.frames {
        let (bg, _) = frame.border_ring_stats(BORDER_RING_PX);
        let b = frame.disk_mean(DETECTION_DISK_RADIUS_PX) - bg;
        measured.push((frame.z_stage_nm, b));
    }

    let detected: Vec<bool> = measured.iter().map(|&(_, b)| b > threshold).collect();

    // Longest consecutive detected run; prefer the run containing the
    // brightest detected frame on ties.
    let mut best: Option<(usize, usize)> = None; // (start, len)
    let mut start = None;
    for (i, &d) in detected.iter().chain(std::iter::once(&false)).enumerate() {
        match (d, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                let len = i - s;
                let better = match best {
                    None => true,
                    Some((bs, bl)) => {
                        len > bl
                            || (len == bl && run_peak(&measured, s, len) > run_peak(&measured, bs, bl))
                    }
                };
                if better {
                    best = Some((s, len));
                }
                start = None;
            }
            _ => {}
        }
    }

    let Some((s, len)) = best else {
        return Err(Error::FewerThanThreeFrames { id, len: 0 });
    };
    if len < 3 {
        return Err(Error::FewerThanThreeFrames { id, len });
    }
    BrightnessSeries::new(id, measured[s..s + len].to_vec())
}

fn run_peak(measured: &[(f64, f64)], start: usize, len: usize) -> f64 {
    measured[start..start + len]
        .iter()
        .map(|&(_, b)| b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Brightness-weighted axial centroid: `sum(b_j z_j) / sum(b_j)`.
pub fn weighted_z(series: &BrightnessSeries) -> Result<f64> {
    let wsum: f64 = series.entries.iter().map(|&(_, b)| b).sum();
    if wsum <= 0.0 {
        return Err(Error::ZeroWeightSum { sum: wsum });
    }
    let num: f64 = series.entries.iter().map(|&(z, b)| b * z).sum();
    Ok(num / wsum)
}

/// Uncertainty of the weighted centroid:
/// `sigma^2 = sum(b^2)/sum(b)^2 * sigma_z_im^2 + sum((z - zbar)^2)/sum(b)^2 * sigma_B_im^2`.
pub fn weighted_z_sigma(series: &BrightnessSeries, k: &NoiseConstants) -> Result<f64> {
    k.validate()?;
    let z_bar = weighted_z(series)?;
    let wsum: f64 = series.entries.iter().map(|&(_, b)| b).sum();
    let wsum2 = wsum * wsum;
    let b2: f64 = series.entries.iter().map(|&(_, b)| b * b).sum();
    let spread: f64 = series
        .entries
        .iter()
        .map(|&(z, _)| (z - z_bar) * (z - z_bar))
        .sum();
    let var = b2 / wsum2 * k.sigma_z_im_nm * k.sigma_z_im_nm
        + spread / wsum2 * k.sigma_b_im * k.sigma_b_im;
    Ok(var.sqrt())
}

/// Reference coordinate of one stack: centroid plus propagated uncertainty.
pub fn reference_z(
    stack: &ZStack,
    detection_threshold: f64,
    k: &NoiseConstants,
) -> Result<ReferenceZ> {
    let series = measure_brightness(stack, detection_threshold)?;
    let z_bar_nm = weighted_z(&series)?;
    let sigma_zbar_nm = weighted_z_sigma(&series, k)?;
    Ok(ReferenceZ {
        particle_id: stack.particle.id,
        z_bar_nm,
        sigma_zbar_nm,
        n_frames: series.entries.len(),
    })
}

/// Mean brightness profile of a stack corpus and its Gaussian fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBaseline {
    /// `(dz_nm, mean_brightness)` on a common grid aligned per particle to
    /// its weighted centroid.
    pub profile: Vec<(f64, f64)>,
    pub fit: GaussianFit,
    /// Width of the fitted Gaussian: the single-plane accuracy baseline.
    pub sigma_single_nm: f64,
    pub n_stacks: usize,
}

/// Align every usable stack's brightness series to its weighted centroid,
/// average on a common dz grid (linear interpolation), and fit a Gaussian.
pub fn fit_profile_baseline(stacks: &[ZStack], cfg: &OpticalConfig) -> Result<ProfileBaseline> {
    let threshold = default_detection_threshold(cfg);
    let mut aligned: Vec<Vec<(f64, f64)>> = Vec::new();
    for stack in stacks {
        if !stack.usable {
            continue;
        }
        let Ok(series) = measure_brightness(stack, threshold) else {
            continue;
        };
        let z_bar = weighted_z(&series)?;
        aligned.push(
            series
                .entries
                .iter()
                .map(|&(z, b)| (z - z_bar, b))
                .collect(),
        );
    }
    if aligned.len() < 10 {
        return Err(Error::TooFewSamples {
            need: 10,
            got: aligned.len(),
        });
    }

    // Average raw samples into nearest-grid-point bins. Interpolating each
    // series onto the grid instead would average chords of the profile and
    // inflate the fitted width by ~step^2/6 at this sampling density.
    let grid_step = cfg.z_step_nm / 5.0;
    let mut bins: std::collections::BTreeMap<i64, (f64, usize)> = std::collections::BTreeMap::new();
    for series in &aligned {
        for &(dz, b) in series {
            let g = (dz / grid_step).round() as i64;
            let e = bins.entry(g).or_insert((0.0, 0));
            e.0 += b;
            e.1 += 1;
        }
    }
    let min_contributors = (aligned.len() / 20).max(3);
    let profile: Vec<(f64, f64)> = bins
        .into_iter()
        .filter(|&(_, (_, n))| n >= min_contributors)
        .map(|(g, (sum, n))| (g as f64 * grid_step, sum / n as f64))
        .collect();

    let xs: Vec<f64> = profile.iter().map(|&(dz, _)| dz).collect();
    let ys: Vec<f64> = profile.iter().map(|&(_, b)| b).collect();
    let fit = fit_gaussian(&xs, &ys, &FitOptions::default())?;
    Ok(ProfileBaseline {
        profile,
        sigma_single_nm: fit.sigma,
        fit,
        n_stacks: aligned.len(),
    })
}
