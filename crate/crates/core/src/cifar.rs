//! CIFAR-10 binary format support.
//!
//! Each record is 3073 bytes: one label byte (0-9) followed by 3072 pixel
//! bytes laid out as 1024 R, 1024 G, 1024 B, each plane row-major 32x32.
//! Standard batch files hold 10000 records.
//!
//! Preprocessing rescales pixels to [0, 1] and centers each channel by
//! subtracting its mean. The mean is computed on the training split and
//! must be reused for test data.
//!
//! `write_synthetic_batch` emits files in the exact same format with a
//! learnable oriented-grating task per class, so the full pipeline can run
//! where the real dataset is not available.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

pub const IMAGE_DIM: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;
pub const PLANE_BYTES: usize = IMAGE_DIM * IMAGE_DIM; // 1024
pub const IMAGE_BYTES: usize = CHANNELS * PLANE_BYTES; // 3072
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES; // 3073

/// A preprocessed split: images `[n, 3, 32, 32]` and labels `[n]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the given example rows into a batch pair.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let stride = self.images.len() / self.len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels.data()[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (Tensor::new(shape, data), Tensor::new(vec![indices.len()], labels))
    }
}

/// Splits raw record bytes into the pixel stream and the label stream.
/// A trailing partial record is a format error reporting the byte offset
/// where the truncated record starts.
pub fn split_records(bytes: &[u8], origin: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = bytes.len() / RECORD_BYTES;
    let rem = bytes.len() % RECORD_BYTES;
    if rem != 0 {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: (n * RECORD_BYTES) as u64,
            msg: format!(
                "truncated record: {rem} trailing bytes (records are {RECORD_BYTES} bytes)"
            ),
        });
    }
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(Error::Format {
                path: origin.to_string(),
                offset: (i * RECORD_BYTES) as u64,
                msg: format!("label byte {} outside 0..{NUM_CLASSES}", rec[0]),
            });
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok((images, labels))
}

/// Reads one batch file and splits it into pixel and label bytes.
pub fn read_batch_file(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    split_records(&bytes, &path.display().to_string())
}

/// Decodes pixel bytes to `[n, 3, 32, 32]` reals in [0, 1].
pub fn decode_images(raw_images: &[u8]) -> Result<Tensor> {
    if raw_images.len() % IMAGE_BYTES != 0 {
        return Err(Error::InvalidInput(format!(
            "pixel byte count {} is not a multiple of {IMAGE_BYTES}",
            raw_images.len()
        )));
    }
    let n = raw_images.len() / IMAGE_BYTES;
    let data = raw_images.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![n, CHANNELS, IMAGE_DIM, IMAGE_DIM], data))
}

pub fn decode_labels(raw_labels: &[u8]) -> Result<Tensor> {
    for (i, &l) in raw_labels.iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(Error::InvalidInput(format!(
                "label {l} at record {i} outside 0..{NUM_CLASSES}"
            )));
        }
    }
    Ok(Tensor::new(
        vec![raw_labels.len()],
        raw_labels.iter().map(|&l| l as f64).collect(),
    ))
}

/// Per-channel means of a `[n, 3, h, w]` image tensor.
pub fn channel_means(images: &Tensor) -> [f64; CHANNELS] {
    let n = images.batch();
    let plane = images.len() / (n * CHANNELS);
    let mut sums = [0.0; CHANNELS];
    for img in 0..n {
        let row = images.row(img);
        for (ch, sum) in sums.iter_mut().enumerate() {
            *sum += row[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    sums.map(|s| s / (n * plane) as f64)
}

pub fn center_channels(images: &mut Tensor, means: &[f64; CHANNELS]) {
    let n = images.batch();
    let plane = images.len() / (n * CHANNELS);
    let data = images.data_mut();
    for img in 0..n {
        for (ch, &m) in means.iter().enumerate() {
            let start = (img * CHANNELS + ch) * plane;
            for v in &mut data[start..start + plane] {
                *v -= m;
            }
        }
    }
}

/// Decodes and preprocesses one split. With `means: None` the channel means
/// are computed from this data (training split); pass the returned means
/// back in to preprocess test data consistently. Output pixels lie in
/// [-1, 1].
pub fn preprocess(
    raw_images: &[u8],
    raw_labels: &[u8],
    means: Option<[f64; CHANNELS]>,
) -> Result<(Tensor, Tensor, [f64; CHANNELS])> {
    let mut images = decode_images(raw_images)?;
    let labels = decode_labels(raw_labels)?;
    if images.batch() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} images but {} labels",
            images.batch(),
            labels.len()
        )));
    }
    let means = means.unwrap_or_else(|| channel_means(&images));
    center_channels(&mut images, &means);
    Ok((images, labels, means))
}

/// Loads a training and a test split from a directory holding standard
/// batch files (`data_batch_1.bin` .. `data_batch_5.bin`, `test_batch.bin`).
/// Takes the first `train_n` / `test_n` records; test data is centered with
/// the training means.
pub fn load_dataset(dir: &Path, train_n: usize, test_n: usize) -> Result<(Dataset, Dataset)> {
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for i in 1..=5 {
        if train_images.len() >= train_n * IMAGE_BYTES {
            break;
        }
        let path = dir.join(format!("data_batch_{i}.bin"));
        if !path.exists() {
            break;
        }
        let (img, lab) = read_batch_file(&path)?;
        train_images.extend_from_slice(&img);
        train_labels.extend_from_slice(&lab);
    }
    if train_labels.len() < train_n {
        return Err(Error::InvalidInput(format!(
            "requested {train_n} training records but only {} available under {}",
            train_labels.len(),
            dir.display()
        )));
    }
    train_images.truncate(train_n * IMAGE_BYTES);
    train_labels.truncate(train_n);

    let (test_images, test_labels) = read_batch_file(&dir.join("test_batch.bin"))?;
    if test_labels.len() < test_n {
        return Err(Error::InvalidInput(format!(
            "requested {test_n} test records but only {} available",
            test_labels.len()
        )));
    }

    let (images, labels, means) = preprocess(&train_images, &train_labels, None)?;
    let train = Dataset { images, labels };
    let (images, labels, _) = preprocess(
        &test_images[..test_n * IMAGE_BYTES],
        &test_labels[..test_n],
        Some(means),
    )?;
    Ok((train, Dataset { images, labels }))
}

/// Writes `records` synthetic records in CIFAR-10 binary format. Classes
/// are oriented sinusoidal gratings (orientation = class * 18 degrees) with
/// a random per-image phase and per-pixel noise, balanced across classes
/// and shuffled. The task is learnable by a small CNN but not trivially
/// separable.
pub fn write_synthetic_batch(path: &Path, records: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut payload = vec![0u8; records * RECORD_BYTES];
    for (slot, &idx) in order.iter().enumerate() {
        let class = idx % NUM_CLASSES;
        let theta = class as f64 * std::f64::consts::PI / NUM_CLASSES as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let rec = &mut payload[slot * RECORD_BYTES..(slot + 1) * RECORD_BYTES];
        rec[0] = class as u8;
        for ch in 0..CHANNELS {
            let ch_phase = phase + ch as f64 * 0.9;
            for y in 0..IMAGE_DIM {
                for x in 0..IMAGE_DIM {
                    let t = 2.0 * std::f64::consts::TAU * (x as f64 * dx + y as f64 * dy)
                        / IMAGE_DIM as f64;
                    let signal = 127.5 + 55.0 * (t + ch_phase).sin();
                    let noise: f64 = rng.gen_range(-60.0..60.0);
                    rec[1 + ch * PLANE_BYTES + y * IMAGE_DIM + x] =
                        (signal + noise).clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    fs::write(path, payload)?;
    Ok(())
}

/// Writes a synthetic train + test pair using the standard file names.
pub fn write_synthetic_dataset(dir: &Path, train_records: usize, test_records: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_synthetic_batch(&dir.join("data_batch_1.bin"), train_records, seed)?;
    write_synthetic_batch(&dir.join("test_batch.bin"), test_records, seed.wrapping_add(0x9e37_79b9))?;
    Ok(())
}
