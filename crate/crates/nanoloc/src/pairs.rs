//! Dual-focal-plane training pairs.
//!
//! Two frames of one stack offset by `delta` emulate a simultaneous
//! two-plane acquisition; the label is the defocus of the bottom frame
//! relative to the particle's reference coordinate,
//! `dz = z_bottom - z_bar`. Pair payloads are stored in `f32`, the training
//! precision, so datasets round-trip bit-exactly through the on-disk format.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::OpticalConfig;
use crate::error::{Error, Result};
use crate::reference::{default_detection_threshold, ReferenceZ};
use crate::sim::{ZStack, BORDER_RING_PX, DETECTION_DISK_RADIUS_PX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

/// One dual-plane measurement: two pixel blocks and the defocus label.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub particle_id: u64,
    pub dz_label_nm: f32,
    pub bottom_z_stage_nm: f32,
    pub bottom_px: Vec<f32>,
    pub top_px: Vec<f32>,
}

/// Labeled pair dataset at a single offset, with per-sample split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub delta_nm: f32,
    pub crop_px: u32,
    pub pixel_size_nm: f32,
    pub samples: Vec<PairSample>,
    pub splits: Vec<Split>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|&(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Pixels per single frame.
    pub fn frame_len(&self) -> usize {
        (self.crop_px as usize) * (self.crop_px as usize)
    }
}

/// Offset expressed in grid steps, or `DeltaNotOnGrid`.
pub fn delta_steps(delta_nm: f64, z_step_nm: f64) -> Result<usize> {
    let ratio = delta_nm / z_step_nm;
    let steps = ratio.round();
    if delta_nm <= 0.0 || steps < 1.0 || (ratio - steps).abs() > 1e-9 {
        return Err(Error::DeltaNotOnGrid {
            delta_nm,
            z_step_nm,
        });
    }
    Ok(steps as usize)
}

/// Build every admissible pair of one stack at offset `delta_nm`.
///
/// A pair is kept when at least one of its two frames has detected particle
/// signal; pairs with one nearly dark frame must survive, because they are
/// exactly what degrades large offsets.
pub fn build_pairs(
    stack: &ZStack,
    reference: &ReferenceZ,
    delta_nm: f64,
    cfg: &OpticalConfig,
) -> Result<Vec<PairSample>> {
    let steps = delta_steps(delta_nm, stack.z_step_nm)?;
    let threshold = default_detection_threshold(cfg).max(0.0);

    let detected: Vec<bool> = stack
        .frames
        .iter()
        .map(|frame| {
            let (bg, _) = frame.border_ring_stats(BORDER_RING_PX);
            frame.disk_mean(DETECTION_DISK_RADIUS_PX) - bg > threshold
        })
        .collect();

    let mut out = Vec::new();
    for bottom in 0..stack.frames.len().saturating_sub(steps) {
        let top = bottom + steps;
        if !(detected[bottom] || detected[top]) {
            continue;
        }
        let bf = &stack.frames[bottom];
        let tf = &stack.frames[top];
        let dz_label = bf.z_stage_nm - reference.z_bar_nm;
        out.push(PairSample {
            particle_id: stack.particle.id,
            dz_label_nm: dz_label as f32,
            bottom_z_stage_nm: bf.z_stage_nm as f32,
            bottom_px: bf.pixels.iter().map(|&p| p as f32).collect(),
            top_px: tf.pixels.iter().map(|&p| p as f32).collect(),
        });
    }
    Ok(out)
}

/// Assign train/test tags by particle, so no particle contributes
/// near-duplicate frames to both splits. Deterministic given the seed.
pub fn split_dataset(
    samples: Vec<PairSample>,
    delta_nm: f32,
    crop_px: u32,
    pixel_size_nm: f32,
    train_fraction: f64,
    seed: u64,
) -> Result<PairDataset> {
    let mut ids: Vec<u64> = samples.iter().map(|s| s.particle_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 10 {
        return Err(Error::TooFewParticles {
            need: 10,
            got: ids.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let train_ids: std::collections::HashSet<u64> = ids[..n_train].iter().copied().collect();

    let splits = samples
        .iter()
        .map(|s| {
            if train_ids.contains(&s.particle_id) {
                Split::Train
            } else {
                Split::Test
            }
        })
        .collect();

    Ok(PairDataset {
        delta_nm,
        crop_px,
        pixel_size_nm,
        samples,
        splits,
    })
}
