//! Run configuration: optics, training hyperparameters, and the flat
//! JSON schema consumed by the CLI.
//!
//! A single master seed drives every stage. Stage seeds are derived by
//! hashing the stage name (FNV-1a) into the master seed and finalizing
//! with SplitMix64, so each stage is independently reproducible.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Forward image model parameters for the synthetic microscope.
///
/// Lengths are in nanometers, brightness in camera units (the same units
/// as `sensor_noise_rms`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    /// Width of the axial brightness envelope.
    pub axial_sigma_nm: f64,
    /// Skew coefficient of the axial envelope, in [-1, 1]. Zero is symmetric.
    pub asymmetry: f64,
    /// In-focus lateral spot width.
    pub lateral_sigma0_nm: f64,
    /// Dimensionless spot widening per unit defocus (in units of `axial_sigma_nm`).
    pub lateral_growth: f64,
    /// Total integrated brightness of a particle imaged at the envelope peak.
    pub peak_brightness: f64,
    /// RMS of the additive per-pixel camera noise.
    pub sensor_noise_rms: f64,
    /// RMS error of the stage encoder along the optical axis.
    pub encoder_sigma_nm: f64,
    /// Physical size of one pixel at the sample plane.
    pub pixel_size_nm: f64,
    /// Crop side length in pixels.
    pub crop_px: u32,
    /// Axial sampling step of a z-stack.
    pub z_step_nm: f64,
    /// Constant background level added to every pixel.
    pub background: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig {
            axial_sigma_nm: 260.0,
            asymmetry: 0.2,
            lateral_sigma0_nm: 60.0,
            lateral_growth: 0.3,
            // Calibrated so that the mean brightness-profile localization
            // uncertainty over a default run lands near 18 nm.
            peak_brightness: 3200.0,
            sensor_noise_rms: 0.73,
            encoder_sigma_nm: 35.0,
            pixel_size_nm: 33.6,
            crop_px: 64,
            z_step_nm: 250.0,
            background: 10.0,
        }
    }
}

impl OpticalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.axial_sigma_nm > 0.0) {
            return bad("axial_sigma_nm must be > 0");
        }
        if !(-1.0..=1.0).contains(&self.asymmetry) {
            return bad("asymmetry must lie in [-1, 1]");
        }
        if !(self.lateral_sigma0_nm > 0.0) {
            return bad("lateral_sigma0_nm must be > 0");
        }
        if !(self.lateral_growth >= 0.0) {
            return bad("lateral_growth must be >= 0");
        }
        if !(self.peak_brightness >= 0.0) {
            return bad("peak_brightness must be >= 0");
        }
        if !(self.sensor_noise_rms >= 0.0) {
            return bad("sensor_noise_rms must be >= 0");
        }
        if !(self.encoder_sigma_nm >= 0.0) {
            return bad("encoder_sigma_nm must be >= 0");
        }
        if !(self.pixel_size_nm > 0.0) {
            return bad("pixel_size_nm must be > 0");
        }
        if self.crop_px < 8 {
            return bad("crop_px must be >= 8");
        }
        if !(self.z_step_nm > 0.0) {
            return bad("z_step_nm must be > 0");
        }
        if !self.background.is_finite() {
            return bad("background must be finite");
        }
        Ok(())
    }

    /// Physical side length of the crop in nm.
    pub fn crop_size_nm(&self) -> f64 {
        f64::from(self.crop_px) * self.pixel_size_nm
    }
}

/// Optimizer and schedule hyperparameters for CNN training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Targets are trained as `dz_label / label_scale_nm` to keep them O(1);
    /// predictions are rescaled back to nm on output.
    pub label_scale_nm: f64,
    /// Width of the first fully connected layer.
    pub fc_hidden: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 16,
            epochs: 400,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 1,
            label_scale_nm: 1000.0,
            fc_hidden: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0) {
            return bad("adam_beta1 must lie in (0, 1)");
        }
        if !(0.0 < self.adam_beta2 && self.adam_beta2 < 1.0) {
            return bad("adam_beta2 must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if !(self.label_scale_nm > 0.0) {
            return bad("label_scale_nm must be > 0");
        }
        if self.fc_hidden == 0 {
            return bad("fc_hidden must be > 0");
        }
        Ok(())
    }
}

/// Resolved configuration for a full pipeline run. Flat on disk: every field
/// appears at the top level of the JSON file, CLI flags override file values.
///
/// The defaults reproduce the desk-scale end-to-end run: 1000 particles,
/// 7-frame stacks over a 1500 nm scan, 60 training epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    // Imaging model.
    pub axial_sigma_nm: f64,
    pub asymmetry: f64,
    pub lateral_sigma0_nm: f64,
    pub lateral_growth: f64,
    pub peak_brightness: f64,
    pub sensor_noise_rms: f64,
    pub encoder_sigma_nm: f64,
    pub pixel_size_nm: f64,
    pub crop_px: u32,
    pub z_step_nm: f64,
    pub background: f64,

    // Scan geometry.
    pub n_particles: usize,
    pub z_min_nm: f64,
    pub z_max_nm: f64,

    // Pairing.
    pub deltas_nm: Vec<f64>,
    pub train_fraction: f64,

    // Training.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_scale_nm: f64,
    pub fc_hidden: u32,

    // Evaluation.
    pub sweep_seeds: usize,
    pub proportionality_bins: usize,

    // Orchestration.
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let optics = OpticalConfig::default();
        RunConfig {
            axial_sigma_nm: optics.axial_sigma_nm,
            asymmetry: optics.asymmetry,
            lateral_sigma0_nm: optics.lateral_sigma0_nm,
            lateral_growth: optics.lateral_growth,
            peak_brightness: optics.peak_brightness,
            sensor_noise_rms: optics.sensor_noise_rms,
            encoder_sigma_nm: optics.encoder_sigma_nm,
            pixel_size_nm: optics.pixel_size_nm,
            crop_px: optics.crop_px,
            z_step_nm: optics.z_step_nm,
            background: optics.background,
            n_particles: 1000,
            z_min_nm: 0.0,
            z_max_nm: 1500.0,
            deltas_nm: vec![250.0, 500.0, 750.0],
            train_fraction: 0.8,
            learning_rate: 0.001,
            batch_size: 16,
            epochs: 60,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            label_scale_nm: 1000.0,
            fc_hidden: 128,
            sweep_seeds: 3,
            proportionality_bins: 50,
            output_dir: PathBuf::from("runs/default"),
            master_seed: 7,
            jobs: 1,
        }
    }
}

impl RunConfig {
    pub fn optics(&self) -> OpticalConfig {
        OpticalConfig {
            axial_sigma_nm: self.axial_sigma_nm,
            asymmetry: self.asymmetry,
            lateral_sigma0_nm: self.lateral_sigma0_nm,
            lateral_growth: self.lateral_growth,
            peak_brightness: self.peak_brightness,
            sensor_noise_rms: self.sensor_noise_rms,
            encoder_sigma_nm: self.encoder_sigma_nm,
            pixel_size_nm: self.pixel_size_nm,
            crop_px: self.crop_px,
            z_step_nm: self.z_step_nm,
            background: self.background,
        }
    }

    /// Train config for a given stage seed.
    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            seed,
            label_scale_nm: self.label_scale_nm,
            fc_hidden: self.fc_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optics().validate()?;
        self.train(0).validate()?;
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if self.n_particles == 0 {
            return bad("n_particles must be > 0");
        }
        if !(self.z_max_nm > self.z_min_nm) {
            return bad("z_max_nm must be > z_min_nm");
        }
        if self.deltas_nm.is_empty() {
            return bad("deltas_nm must not be empty");
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.sweep_seeds == 0 {
            return bad("sweep_seeds must be > 0");
        }
        if self.proportionality_bins < 2 {
            return bad("proportionality_bins must be >= 2");
        }
        if self.jobs == 0 {
            return bad("jobs must be > 0");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        Ok(cfg)
    }

    /// Echo the resolved config into an output directory so the stage can be re-run.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Content hash of the resolved config, for tagging reports.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named pipeline stage, derived from the master seed.
pub fn stage_seed(master_seed: u64, stage: &str) -> u64 {
    splitmix(master_seed ^ fnv1a(stage.as_bytes()))
}

/// Seed for the `index`-th independent child of a stage (per particle,
/// per frame, per sweep cycle).
pub fn child_seed(seed: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        OpticalConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn default_crop_matches_field_of_view() {
        let cfg = OpticalConfig::default();
        let size = cfg.crop_size_nm();
        assert!((2100.0..2200.0).contains(&size), "crop {size} nm");
    }

    #[test]
    fn rejects_bad_fields() {
        let mut cfg = OpticalConfig::default();
        cfg.crop_px = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = OpticalConfig::default();
        cfg.asymmetry = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.n_particles = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn stage_seeds_differ_by_stage_and_master() {
        let a = stage_seed(7, "simulate");
        let b = stage_seed(7, "train");
        let c = stage_seed(8, "simulate");
        assert_ne!(a, b);
        assert_ne!(a, c);
        // Derivation is a pure function.
        assert_eq!(a, stage_seed(7, "simulate"));
    }

    #[test]
    fn child_seeds_are_distinct() {
        let s = stage_seed(1, "simulate");
        let seeds: Vec<u64> = (0..1000).map(|i| child_seed(s, i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
    }

    #[test]
    fn run_config_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"n_particles": 42}"#).unwrap();
        assert_eq!(cfg.n_particles, 42);
        assert_eq!(cfg.crop_px, RunConfig::default().crop_px);
    }
}
