//! Synthetic datasets and the tiny raw-image file loader.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::config::{DatasetKind, DatasetSpec};
use crate::error::{CoreError, Result};
use crate::graph::Fnv1a;
use crate::tensor::TensorValue;

pub const TINY_IMAGE_MAGIC: &[u8; 8] = b"TIMG0001";

/// A labeled dataset: inputs [n, ...] and integer class targets [n].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: TensorValue,
    pub targets: TensorValue,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-example input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        self.inputs.shape[1..].to_vec()
    }

    /// Stable content digest recorded in run manifests.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for dim in &self.inputs.shape {
            h.write_u64(*dim as u64);
        }
        for v in &self.inputs.data {
            h.write_u64(v.to_bits());
        }
        for v in &self.targets.data {
            h.write_u64(v.to_bits());
        }
        h.write_u64(self.classes as u64);
        h.finish()
    }

    /// Split into train/validation with the last `val_fraction` rows held
    /// out. Rows are already generated in random order; the split is
    /// disjoint and deterministic.
    pub fn split(&self, val_fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let n_train = n - n_val;
        let take = |lo: usize, hi: usize| {
            let in_stride = self.inputs.per_example();
            let mut in_shape = self.inputs.shape.clone();
            in_shape[0] = hi - lo;
            Dataset {
                inputs: TensorValue::new(
                    in_shape,
                    self.inputs.data[lo * in_stride..hi * in_stride].to_vec(),
                ),
                targets: TensorValue::new(vec![hi - lo], self.targets.data[lo..hi].to_vec()),
                classes: self.classes,
            }
        };
        (take(0, n_train), take(n_train, n))
    }
}

/// Build the dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.kind {
        DatasetKind::SyntheticSpirals => Ok(spirals(spec)),
        DatasetKind::SyntheticParity => Ok(parity(spec)),
        DatasetKind::TinyImageFile => {
            let path = spec.path.as_ref().ok_or_else(|| {
                CoreError::InvalidConfig("tiny-image-file dataset needs a path".into())
            })?;
            load_tiny_image(Path::new(path))
        }
    }
}

/// Interleaved spiral arms, one per class, with Gaussian coordinate noise.
fn spirals(spec: &DatasetSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let k = spec.classes;
    let turns = 1.75;
    let mut inputs = Vec::with_capacity(n * 2);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let t: f64 = rng.gen::<f64>();
        let radius = 0.1 + 0.9 * t;
        let angle = turns * std::f64::consts::TAU * t
            + std::f64::consts::TAU * class as f64 / k as f64;
        let (sin, cos) = angle.sin_cos();
        inputs.push(radius * cos + spec.noise * gaussian(&mut rng));
        inputs.push(radius * sin + spec.noise * gaussian(&mut rng));
        targets.push(class as f64);
    }
    Dataset {
        inputs: TensorValue::new(vec![n, 2], inputs),
        targets: TensorValue::new(vec![n], targets),
        classes: k,
    }
}

/// Sign-parity of `features` jittered bits; always two classes.
fn parity(spec: &DatasetSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let bits = spec.features;
    let mut inputs = Vec::with_capacity(n * bits);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut parity = 0usize;
        for _ in 0..bits {
            let sign: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            if sign < 0.0 {
                parity ^= 1;
            }
            inputs.push(sign + spec.noise * gaussian(&mut rng));
        }
        targets.push(parity as f64);
    }
    Dataset {
        inputs: TensorValue::new(vec![n, bits], inputs),
        targets: TensorValue::new(vec![n], targets),
        classes: 2,
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms in, one normal out
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Raw-pixel image file: magic `TIMG0001`, u32 LE count/channels/height/
/// width/classes, then per image a u32 LE label and channels*height*width
/// bytes in [0, 255] scaled to [0, 1].
pub fn load_tiny_image(path: &Path) -> Result<Dataset> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| CoreError::CorruptCheckpoint("image file missing magic".into()))?;
    if &magic != TINY_IMAGE_MAGIC {
        return Err(CoreError::CorruptCheckpoint(format!(
            "bad image magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut std::fs::File| -> Result<u32> {
        f.read_exact(&mut u32buf)
            .map_err(|_| CoreError::CorruptCheckpoint("truncated image header".into()))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let count = read_u32(&mut file)? as usize;
    let channels = read_u32(&mut file)? as usize;
    let height = read_u32(&mut file)? as usize;
    let width = read_u32(&mut file)? as usize;
    let classes = read_u32(&mut file)? as usize;
    if classes < 2 || count == 0 {
        return Err(CoreError::CorruptCheckpoint(
            "image header must declare >= 1 image and >= 2 classes".into(),
        ));
    }
    let pixels = channels * height * width;
    let mut inputs = Vec::with_capacity(count * pixels);
    let mut targets = Vec::with_capacity(count);
    let mut pixel_buf = vec![0u8; pixels];
    for i in 0..count {
        let mut label_buf = [0u8; 4];
        file.read_exact(&mut label_buf)
            .map_err(|_| CoreError::CorruptCheckpoint(format!("truncated label {i}")))?;
        let label = u32::from_le_bytes(label_buf) as usize;
        if label >= classes {
            return Err(CoreError::CorruptCheckpoint(format!(
                "label {label} out of range at image {i}"
            )));
        }
        file.read_exact(&mut pixel_buf)
            .map_err(|_| CoreError::CorruptCheckpoint(format!("truncated pixels at image {i}")))?;
        inputs.extend(pixel_buf.iter().map(|&b| b as f64 / 255.0));
        targets.push(label as f64);
    }
    Ok(Dataset {
        inputs: TensorValue::new(vec![count, channels, height, width], inputs),
        targets: TensorValue::new(vec![count], targets),
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec {
            kind,
            size: 100,
            noise: 0.1,
            classes: 2,
            seed: 7,
            features: 3,
            path: None,
        }
    }

    #[test]
    fn spirals_deterministic_and_balanced() {
        let a = generate(&spec(DatasetKind::SyntheticSpirals)).unwrap();
        let b = generate(&spec(DatasetKind::SyntheticSpirals)).unwrap();
        assert_eq!(a.inputs.data, b.inputs.data);
        assert_eq!(a.digest(), b.digest());
        let ones = a.targets.data.iter().filter(|&&t| t == 1.0).count();
        assert_eq!(ones, 50);
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let d = generate(&spec(DatasetKind::SyntheticSpirals)).unwrap();
        let (train, val) = d.split(0.2);
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 20);
        assert_eq!(
            &d.inputs.data[..train.inputs.data.len()],
            &train.inputs.data[..]
        );
    }

    #[test]
    fn parity_labels_match_signs() {
        let d = generate(&spec(DatasetKind::SyntheticParity)).unwrap();
        for i in 0..d.len() {
            let row = &d.inputs.data[i * 3..(i + 1) * 3];
            let parity = row.iter().filter(|&&v| v < 0.0).count() % 2;
            // noise is small relative to +-1, so sign survives
            assert_eq!(d.targets.data[i], parity as f64);
        }
    }

    #[test]
    fn tiny_image_round_trip() {
        let dir = std::env::temp_dir().join("fornas_tiny_image_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("data.timg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TINY_IMAGE_MAGIC);
        for v in [2u32, 1, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for label in [0u32, 1] {
            bytes.extend_from_slice(&label.to_le_bytes());
            bytes.extend_from_slice(&[0, 64, 128, 255]);
        }
        std::fs::write(&path, &bytes).unwrap();
        let d = load_tiny_image(&path).unwrap();
        assert_eq!(d.inputs.shape, vec![2, 1, 2, 2]);
        assert_eq!(d.targets.data, vec![0.0, 1.0]);
        assert!((d.inputs.data[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_image_rejects_truncation() {
        let dir = std::env::temp_dir().join("fornas_tiny_image_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cut.timg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TINY_IMAGE_MAGIC);
        for v in [1u32, 1, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 64]); // half the pixels
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_tiny_image(&path).is_err());
    }
}
