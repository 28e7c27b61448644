//! Model checkpoints (`NLM1`), little-endian, CRC32-trailed:
//!
//! ```text
//! magic "NLM1" | u32 version |
//! u32 crop_px | u32 in_channels | u32 c1 | u32 c2 | u32 c3 | u32 fc_hidden |
//! f32 dropout_rate | f64 label_scale_nm | f32 input_mean | f32 input_std |
//! u64 value count | values as f32: per layer, parameters then running stats |
//! u32 crc32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nlt::{write_atomic, Builder, Cursor};

use super::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NLM1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn collect_values(model: &mut Model<f32>) -> Vec<f32> {
    let mut values = Vec::new();
    for p in model.params() {
        values.extend_from_slice(p.data());
    }
    for s in model.state() {
        values.extend_from_slice(s);
    }
    values
}

pub fn checkpoint_to_bytes(model: &mut Model<f32>) -> Vec<u8> {
    let spec = model.spec.clone();
    let values = collect_values(model);
    let mut b = Builder::new(64 + values.len() * 4);
    b.raw(&CHECKPOINT_MAGIC);
    b.u32(CHECKPOINT_VERSION);
    b.u32(spec.crop_px);
    b.u32(spec.in_channels);
    b.u32(spec.conv_channels[0]);
    b.u32(spec.conv_channels[1]);
    b.u32(spec.conv_channels[2]);
    b.u32(spec.fc_hidden);
    b.f32(spec.dropout_rate as f32);
    b.raw(&spec.label_scale_nm.to_le_bytes());
    b.f32(spec.input_mean);
    b.f32(spec.input_std);
    b.u64(values.len() as u64);
    b.f32s(&values);
    b.seal()
}

pub fn save_model(model: &mut Model<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes, path)
}

pub fn model_from_bytes(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let mut c = Cursor::new(bytes, path);
    c.magic(CHECKPOINT_MAGIC)?;
    c.version(CHECKPOINT_VERSION)?;
    let crop_px = c.u32("crop_px")?;
    let in_channels = c.u32("in_channels")?;
    let c1 = c.u32("conv1 width")?;
    let c2 = c.u32("conv2 width")?;
    let c3 = c.u32("conv3 width")?;
    let fc_hidden = c.u32("fc_hidden")?;
    let dropout_rate = f64::from(c.f32("dropout_rate")?);
    let label_scale_nm = c.f64("label_scale_nm")?;
    let input_mean = c.f32("input_mean")?;
    let input_std = c.f32("input_std")?;
    let count = c.u64("value count")?;
    c.verify_body(4, count)?;

    let spec = ModelSpec {
        crop_px,
        in_channels,
        conv_channels: [c1, c2, c3],
        fc_hidden,
        dropout_rate,
        label_scale_nm,
        input_mean,
        input_std,
    };
    let mut model: Model<f32> =
        Model::new(spec, 0).map_err(|e| c.corrupt(format!("invalid spec: {e}")))?;

    let values = c.f32s(count as usize, "values")?;
    let mut offset = 0usize;
    for p in model.params() {
        let n = p.numel();
        if offset + n > values.len() {
            return Err(c.corrupt("parameter blob shorter than the architecture needs"));
        }
        p.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    for s in model.state() {
        let n = s.len();
        if offset + n > values.len() {
            return Err(c.corrupt("running-stat blob shorter than the architecture needs"));
        }
        s.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    if offset != values.len() {
        return Err(c.corrupt(format!(
            "{} trailing values after filling the model",
            values.len() - offset
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;
    use crate::nn::Mode;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_like_model() -> Model<f32> {
        let spec = ModelSpec {
            crop_px: 8,
            in_channels: 2,
            conv_channels: [16, 32, 64],
            fc_hidden: 16,
            dropout_rate: 0.5,
            label_scale_nm: 1000.0,
            input_mean: 12.5,
            input_std: 7.25,
        };
        let mut model = Model::new(spec, 99).unwrap();
        // Touch the running stats so the checkpoint carries non-trivial state.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..4 * 2 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(&[4, 2, 8, 8], data);
        model.forward(x, Mode::Train, &mut rng).unwrap();
        model
    }

    #[test]
    fn checkpoint_round_trip_is_byte_equal_and_predicts_identically() {
        let mut model = trained_like_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nlm");
        save_model(&mut model, &path).unwrap();
        let mut loaded = load_model(&path).unwrap();

        assert_eq!(model.spec, loaded.spec);
        assert_eq!(checkpoint_to_bytes(&mut model), checkpoint_to_bytes(&mut loaded));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..2 * 2 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xa = Tensor::from_vec(&[2, 2, 8, 8], data.clone());
        let xb = Tensor::from_vec(&[2, 2, 8, 8], data);
        let pa = model.predict_nm(xa).unwrap();
        let pb = loaded.predict_nm(xb).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut model = trained_like_model();
        let bytes = checkpoint_to_bytes(&mut model);

        let mut bad_magic = bytes.clone();
        bad_magic[1] = b'?';
        assert!(matches!(
            model_from_bytes(&bad_magic, Path::new("m.nlm")),
            Err(Error::BadMagic { .. })
        ));

        let mut bad_version = bytes.clone();
        bad_version[4] = 3;
        assert!(matches!(
            model_from_bytes(&bad_version, Path::new("m.nlm")),
            Err(Error::VersionMismatch { got: 3, .. })
        ));

        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 9], Path::new("m.nlm")),
            Err(Error::TruncatedFile { .. })
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(
            model_from_bytes(&flipped, Path::new("m.nlm")),
            Err(Error::ChecksumMismatch { .. })
        ));
    }
}
