//! Datasets: a procedurally generated shape-classification set for
//! desk-scale runs, and the CIFAR-10 binary format loader.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Labeled image set: (n, 3, 32, 32) normalized images.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<u8>,
    pub classes: usize,
}

pub const IMAGE_SIDE: usize = 32;

/// Per-channel normalization constants applied by the CIFAR-10 loader.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD_BYTES: usize = 3073;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the images at `indices` into one contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<u8>) {
        let (_, c, h, w) = self.images.shape();
        let mut out = Tensor4::zeros(indices.len(), c, h, w);
        let sample = c * h * w;
        for (bi, &si) in indices.iter().enumerate() {
            let src = self.images.index(si, 0, 0, 0);
            let dst = out.index(bi, 0, 0, 0);
            out.data_mut()[dst..dst + sample]
                .copy_from_slice(&self.images.data()[src..src + sample]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// Splits off the first `n` samples; returns (head, tail).
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Partition(format!(
                "split point {n} outside (0, {})",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let (hi, hl) = self.batch(&head);
        let (ti, tl) = self.batch(&tail);
        Ok((
            Dataset {
                images: hi,
                labels: hl,
                classes: self.classes,
            },
            Dataset {
                images: ti,
                labels: tl,
                classes: self.classes,
            },
        ))
    }
}

fn render_shape(class: usize, px: &mut [f64], rng: &mut ChaCha8Rng) {
    let side = IMAGE_SIDE as isize;
    let cx = rng.gen_range(12..21) as isize;
    let cy = rng.gen_range(12..21) as isize;
    let r = rng.gen_range(6..11) as isize;
    let bg: [f64; 3] = [
        rng.gen_range(0.02..0.35),
        rng.gen_range(0.02..0.35),
        rng.gen_range(0.02..0.35),
    ];
    let fg: [f64; 3] = [
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
        rng.gen_range(0.55..1.0),
    ];
    let noise = Normal::new(0.0, 0.06).expect("positive std");

    let inside = |dx: isize, dy: isize| -> bool {
        let adx = dx.abs();
        let ady = dy.abs();
        match class {
            // filled disc
            0 => dx * dx + dy * dy <= r * r,
            // square outline
            1 => adx.max(ady) <= r && adx.max(ady) >= r - 2,
            // filled upward triangle
            2 => dy >= -r && dy <= r && adx * 2 <= dy + r,
            // plus sign
            3 => (adx <= 2 || ady <= 2) && adx.max(ady) <= r,
            // ring
            4 => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (r - 3) * (r - 3)
            }
            // diagonal stripes
            5 => adx.max(ady) <= r && (dx + dy).rem_euclid(6) < 3,
            // checkerboard
            6 => adx.max(ady) <= r && ((dx.div_euclid(4) + dy.div_euclid(4)).rem_euclid(2) == 0),
            // diamond outline
            7 => adx + ady <= r && adx + ady >= r - 2,
            // horizontal bars
            8 => adx.max(ady) <= r && dy.rem_euclid(6) < 3,
            // X cross
            _ => (adx - ady).abs() <= 2 && adx.max(ady) <= r,
        }
    };

    for y in 0..side {
        for x in 0..side {
            let hit = inside(x - cx, y - cy);
            for ch in 0..3 {
                let base = if hit { fg[ch] } else { bg[ch] };
                let v = (base + noise.sample(rng)).clamp(0.0, 1.0);
                // normalized to roughly [-1, 1]
                px[(ch * IMAGE_SIDE as usize + y as usize) * IMAGE_SIDE as usize + x as usize] =
                    (v - 0.5) / 0.5;
            }
        }
    }
}

/// Procedurally rendered 32x32 RGB shape classification set. Classes are
/// balanced within one sample; the whole set is a pure function of `seed`.
pub fn synth_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    if !(2..=10).contains(&classes) {
        return Err(Error::Config(format!(
            "classes must lie in [2, 10], got {classes}"
        )));
    }
    if n < classes {
        return Err(Error::Config(format!(
            "need at least one sample per class, got n={n} for {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = 3 * IMAGE_SIDE * IMAGE_SIDE;
    let mut images = Tensor4::zeros(n, 3, IMAGE_SIDE, IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let base = images.index(i, 0, 0, 0);
        render_shape(class, &mut images.data_mut()[base..base + sample], &mut rng);
        labels.push(class as u8);
    }
    Ok(Dataset {
        images,
        labels,
        classes,
    })
}

fn parse_cifar_records(bytes: &[u8], source: &Path) -> Result<(Vec<f64>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "{}: size {} is not a multiple of {CIFAR_RECORD_BYTES}-byte records",
            source.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for rec in 0..n {
        let record = &bytes[rec * CIFAR_RECORD_BYTES..(rec + 1) * CIFAR_RECORD_BYTES];
        let label = record[0];
        if label > 9 {
            return Err(Error::Corrupt(format!(
                "{}: record {rec} carries label byte {label} > 9",
                source.display()
            )));
        }
        labels.push(label);
        // Three 1024-byte planes (R, G, B), each a row-major 32x32 image.
        for ch in 0..3 {
            let plane = &record[1 + ch * 1024..1 + (ch + 1) * 1024];
            let mean = CIFAR_MEAN[ch];
            let std = CIFAR_STD[ch];
            pixels.extend(plane.iter().map(|&b| (b as f64 / 255.0 - mean) / std));
        }
    }
    Ok((pixels, labels))
}

fn dataset_from_files(paths: &[PathBuf]) -> Result<Dataset> {
    let mut all_pixels = Vec::new();
    let mut all_labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path)?;
        let (pixels, labels) = parse_cifar_records(&bytes, path)?;
        all_pixels.extend(pixels);
        all_labels.extend(labels);
    }
    let n = all_labels.len();
    Ok(Dataset {
        images: Tensor4::new(n, 3, IMAGE_SIDE, IMAGE_SIDE, all_pixels)?,
        labels: all_labels,
        classes: 10,
    })
}

/// Loads CIFAR-10 binary data. A file path is parsed directly; a directory
/// is expected to contain the canonical `data_batch_*.bin` training batches.
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        return dataset_from_files(&[path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::MissingData(format!(
            "{} is neither a file nor a directory",
            path.display()
        )));
    }
    let mut batches: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
                .unwrap_or(false)
        })
        .collect();
    batches.sort();
    if batches.is_empty() {
        return Err(Error::MissingData(format!(
            "no data_batch_*.bin files under {}",
            path.display()
        )));
    }
    dataset_from_files(&batches)
}

/// Loads the held-out CIFAR-10 batch (`test_batch.bin`) from a directory.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    let path = dir.join("test_batch.bin");
    if !path.is_file() {
        return Err(Error::MissingData(format!(
            "{} not found",
            path.display()
        )));
    }
    dataset_from_files(&[path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_byte_identical_per_seed() {
        let a = synth_dataset(9, 40, 4).unwrap();
        let b = synth_dataset(9, 40, 4).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        let c = synth_dataset(10, 40, 4).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn synth_classes_are_balanced() {
        let d = synth_dataset(1, 1000, 4).unwrap();
        let mut counts = [0usize; 4];
        for &l in &d.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [250; 4]);

        let d = synth_dataset(1, 10, 3).unwrap();
        let mut counts = [0usize; 3];
        for &l in &d.labels {
            counts[l as usize] += 1;
        }
        let max = counts.iter().max().unwrap();
        let min = counts.iter().min().unwrap();
        assert!(max - min <= 1);
    }

    #[test]
    fn synth_rejects_bad_arguments() {
        assert!(matches!(synth_dataset(0, 10, 1), Err(Error::Config(_))));
        assert!(matches!(synth_dataset(0, 10, 11), Err(Error::Config(_))));
        assert!(matches!(synth_dataset(0, 2, 4), Err(Error::Config(_))));
    }

    #[test]
    fn synth_values_are_normalized() {
        let d = synth_dataset(3, 16, 4).unwrap();
        for &v in d.images.data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    fn fixture_bytes(records: usize) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(records * CIFAR_RECORD_BYTES);
        for rec in 0..records {
            bytes.push((rec % 10) as u8);
            for i in 0..3072u32 {
                bytes.push(((i + rec as u32 * 7) % 256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn cifar_round_trips_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("data_batch_1.bin");
        fs::write(&file, fixture_bytes(10)).unwrap();
        let d = load_cifar10(&file).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.labels, (0..10).map(|i| i as u8).collect::<Vec<_>>());
        // Pixel (record 2, channel 1, row 0, col 3): byte index within the
        // record is 1 + 1024 + 3; raw value (1024 + 3 + 2*7) % 256.
        let raw = ((1024 + 3 + 14) % 256) as f64;
        let expect = (raw / 255.0 - CIFAR_MEAN[1]) / CIFAR_STD[1];
        assert!((d.images.at(2, 1, 0, 3) - expect).abs() < 1e-12);
    }

    #[test]
    fn cifar_rejects_truncated_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let truncated = dir.path().join("data_batch_1.bin");
        let mut bytes = fixture_bytes(2);
        bytes.pop();
        fs::write(&truncated, &bytes).unwrap();
        assert!(matches!(load_cifar10(&truncated), Err(Error::Format(_))));

        let corrupt = dir.path().join("data_batch_2.bin");
        let mut bytes = fixture_bytes(1);
        bytes[0] = 10;
        fs::write(&corrupt, &bytes).unwrap();
        assert!(matches!(load_cifar10(&corrupt), Err(Error::Corrupt(_))));
    }

    #[test]
    fn cifar_missing_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(Error::MissingData(_))
        ));
        assert!(matches!(
            load_cifar10(&dir.path().join("nope")),
            Err(Error::MissingData(_))
        ));
    }
}
