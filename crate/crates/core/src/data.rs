//! CIFAR-10 binary files, augmentation and deterministic batching.
//!
//! A binary batch file is a sequence of 3073-byte records: one label byte,
//! then 1024 red, 1024 green and 1024 blue bytes, each plane row-major.
//! Images are kept as bytes and promoted to `[0, 1]` reals when a batch is
//! assembled.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{RngExt, seq::SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Scalar, Shape, Tensor};

pub const NUM_CLASSES: usize = 10;
pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * SIDE * SIDE;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;

/// Per-channel statistics of the CIFAR-10 training images in `[0, 1]`.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const SHUFFLE_TAG: u64 = 0x5348_5546;
const AUGMENT_TAG: u64 = 0x4155_474d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
            Split::Test => &["test_batch.bin"],
        }
    }

    /// Item count of the full split.
    pub fn expected_len(self) -> usize {
        match self {
            Split::Train => 50_000,
            Split::Test => 10_000,
        }
    }
}

/// Labelled images in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    split: Split,
}

impl Dataset {
    /// `images` holds `labels.len()` consecutive 3072-byte images.
    pub fn from_parts(images: Vec<u8>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() * IMAGE_BYTES {
            return Err(Error::Format(format!("{} image bytes for {} labels", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Format(format!("label {bad} outside [0, {NUM_CLASSES})")));
        }
        Ok(Dataset { images, labels, split })
    }

    /// Random images whose mean colour depends on the class; learnable, for
    /// tests and benchmarks.
    pub fn synthetic(len: usize, seed: u64, split: Split) -> Self {
        let mut rng = seeded_rng(seed, &[split as u64]);
        let labels: Vec<u8> = (0..len).map(|i| (i % NUM_CLASSES) as u8).collect();
        let mut images = Vec::with_capacity(len * IMAGE_BYTES);
        for &l in &labels {
            for c in 0..3 {
                let bright = [(l & 1) != 0, (l & 2) != 0, (l & 4) != 0][c];
                let stripe = l >= 8;
                for y in 0..SIDE {
                    for _ in 0..SIDE {
                        let base: i32 = if bright { 170 } else { 80 };
                        let base = if stripe && y % 4 < 2 { 255 - base } else { base };
                        let v = base + rng.random_range(-60..=60);
                        images.push(v.clamp(0, 255) as u8);
                    }
                }
            }
        }
        Dataset { images, labels, split }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Raw bytes of image `i`, channel-major.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..][..IMAGE_BYTES]
    }

    /// Pixel value in `[0, 1]`.
    pub fn pixel(&self, i: usize, c: usize, y: usize, x: usize) -> f64 {
        self.image(i)[(c * SIDE + y) * SIDE + x] as f64 / 255.0
    }

    /// Items per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// The first `per_class` items of each class, in file order.
    pub fn subset_per_class(&self, per_class: usize) -> Self {
        let mut taken = [0usize; NUM_CLASSES];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            let l = self.label(i);
            if taken[l] < per_class {
                taken[l] += 1;
                labels.push(self.labels[i]);
                images.extend_from_slice(self.image(i));
            }
        }
        Dataset { images, labels, split: self.split }
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Dataset { images: self.images[..n * IMAGE_BYTES].to_vec(), labels: self.labels[..n].to_vec(), split: self.split }
    }

    /// Per-channel mean and standard deviation of the pixels in `[0, 1]`.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let plane = SIDE * SIDE;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in self.images.chunks_exact(IMAGE_BYTES) {
            for c in 0..3 {
                for &b in &img[c * plane..][..plane] {
                    let v = b as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let mean = sum.map(|s| s / n);
        let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt());
        (mean, std)
    }

    /// Writes the items in the binary record format.
    pub fn write_bin(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.len() * RECORD_BYTES);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Images as `(n, 3, 32, 32)` reals in `[0, 1]`, with their labels.
    pub fn gather<T: Scalar>(&self, indices: &[usize]) -> Result<Batch<T>> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let scale = T::from_f64(1.0 / 255.0);
        let mut data = Vec::with_capacity(indices.len() * IMAGE_BYTES);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&b| T::from_f64(b as f64) * scale));
        }
        Ok(Batch {
            images: Tensor::new(Shape::new(vec![indices.len(), 3, SIDE, SIDE])?, data)?,
            labels: indices.iter().map(|&i| self.label(i)).collect(),
        })
    }
}

/// Reads `split` from a directory holding the extracted binary files.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let mut images = Vec::with_capacity(split.expected_len() * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(split.expected_len());
    for name in split.files() {
        let path: PathBuf = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.is_empty() {
            return Err(Error::Format(format!("{} is empty", path.display())));
        }
        if bytes.len() % RECORD_BYTES != 0 {
            let err = io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("{} bytes is not a whole number of {RECORD_BYTES}-byte records", bytes.len()),
            );
            return Err(Error::io(&path, err));
        }
        for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Format(format!("{}: record {r} has label byte {}", path.display(), rec[0])));
            }
            labels.push(rec[0]);
            images.extend_from_slice(&rec[1..]);
        }
    }
    Ok(Dataset { images, labels, split })
}

/// A batch ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Training-time augmentation and normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Zero padding on each side before cropping.
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn cifar(seed: u64) -> Self {
        AugmentPolicy { pad: 4, crop: SIDE, hflip_prob: 0.5, mean: CIFAR_MEAN, std: CIFAR_STD, seed }
    }

    /// Normalisation only.
    pub fn normalize_only(&self) -> Self {
        AugmentPolicy { pad: 0, hflip_prob: 0.0, ..self.clone() }
    }
}

/// Copies a `crop × crop` window at offset `(dy, dx)` of the zero-padded
/// `side × side` plane, optionally mirrored left to right.
#[allow(clippy::too_many_arguments)]
pub fn crop_and_flip<T: Scalar>(src: &[T], dst: &mut [T], side: usize, pad: usize, crop: usize, dy: usize, dx: usize, flip: bool) {
    for y in 0..crop {
        let sy = (y + dy).checked_sub(pad).filter(|&v| v < side);
        for x in 0..crop {
            let xx = if flip { crop - 1 - x } else { x };
            let sx = (xx + dx).checked_sub(pad).filter(|&v| v < side);
            dst[y * crop + x] = match (sy, sx) {
                (Some(sy), Some(sx)) => src[sy * side + sx],
                _ => T::zero(),
            };
        }
    }
}

fn normalize_in_place<T: Scalar>(images: &mut Tensor<T>, policy: &AugmentPolicy) {
    let dims = images.dims().to_vec();
    let plane = dims[2] * dims[3];
    for (i, p) in images.data_mut().chunks_exact_mut(plane).enumerate() {
        let c = i % 3;
        let (m, s) = (T::from_f64(policy.mean[c]), T::from_f64(policy.std[c]));
        p.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Normalisation for evaluation.
pub fn normalize_batch<T: Scalar>(batch: &Batch<T>, policy: &AugmentPolicy) -> Batch<T> {
    let mut out = batch.clone();
    normalize_in_place(&mut out.images, policy);
    out
}

/// Random crop from the padded image, random horizontal flip, then
/// normalisation. Draws depend only on `(policy.seed, epoch, batch_index)`
/// and the position within the batch.
pub fn augment_batch<T: Scalar>(batch: &Batch<T>, policy: &AugmentPolicy, epoch: usize, batch_index: usize) -> Result<Batch<T>> {
    let (n, c, h, w) = batch.images.shape().nchw()?;
    if h != w || policy.crop > h + 2 * policy.pad {
        return Err(Error::Config(format!("cannot crop {} from {h}x{w} padded by {}", policy.crop, policy.pad)));
    }
    let crop = policy.crop;
    let mut rng = seeded_rng(policy.seed, &[AUGMENT_TAG, epoch as u64, batch_index as u64]);
    let mut data = vec![T::zero(); n * c * crop * crop];
    let src = batch.images.data();
    let span = h + 2 * policy.pad - crop;
    for i in 0..n {
        let dy = rng.random_range(0..=span);
        let dx = rng.random_range(0..=span);
        let flip = rng.random_bool(policy.hflip_prob);
        for ch in 0..c {
            let k = i * c + ch;
            crop_and_flip(&src[k * h * w..][..h * w], &mut data[k * crop * crop..][..crop * crop], h, policy.pad, crop, dy, dx, flip);
        }
    }
    let mut images = Tensor::new(Shape::new(vec![n, c, crop, crop])?, data)?;
    normalize_in_place(&mut images, policy);
    Ok(Batch { images, labels: batch.labels.clone() })
}

/// Shuffled index batches; the permutation is a function of
/// `(shuffle_seed, epoch)` only and the last partial batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeded_rng(shuffle_seed, &[SHUFFLE_TAG, epoch as u64]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// In-order index batches for evaluation.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..len).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_records(dir: &Path, name: &str, records: &[(u8, u8)]) -> Vec<u8> {
        let mut bytes = Vec::new();
        for &(label, fill) in records {
            bytes.push(label);
            bytes.extend((0..IMAGE_BYTES).map(|j| fill.wrapping_add(j as u8)));
        }
        fs::write(dir.join(name), &bytes).unwrap();
        bytes
    }

    #[test]
    fn decode_is_byte_exact_and_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let raw = write_records(dir.path(), "test_batch.bin", &[(3, 10), (9, 200), (0, 7)]);
        let ds = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels(), &[3, 9, 0]);
        assert_eq!(ds.label(0), raw[0] as usize);
        assert_eq!(ds.pixel(0, 0, 0, 0), raw[1] as f64 / 255.0);
        // Green plane, row 1, column 2 of item 1.
        assert_eq!(ds.pixel(1, 1, 1, 2), raw[RECORD_BYTES + 1 + 1024 + 32 + 2] as f64 / 255.0);
        let out = dir.path().join("copy.bin");
        ds.write_bin(&out).unwrap();
        assert_eq!(fs::read(out).unwrap(), raw);
    }

    #[test]
    fn train_split_concatenates_five_files() {
        let dir = tempfile::tempdir().unwrap();
        for (f, name) in Split::Train.files().iter().enumerate() {
            write_records(dir.path(), name, &[(f as u8, 0), (f as u8 + 1, 1)]);
        }
        let ds = load_cifar10(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 1, 2, 2, 3, 3, 4, 4, 5]);
    }

    #[test]
    fn load_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path(), Split::Test) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("test_batch.bin")),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join("test_batch.bin"), vec![1u8; RECORD_BYTES + 5]).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Io { .. })));
        let mut bad = vec![0u8; RECORD_BYTES];
        bad[0] = 10;
        fs::write(dir.path().join("test_batch.bin"), bad).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Format(_))));
        fs::write(dir.path().join("test_batch.bin"), b"").unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Format(_))));
    }

    #[test]
    fn subset_takes_first_per_class() {
        let ds = Dataset::synthetic(95, 0, Split::Train);
        let sub = ds.subset_per_class(3);
        assert_eq!(sub.class_counts(), [3; NUM_CLASSES]);
        assert_eq!(sub.image(0), ds.image(0));
        assert_eq!(sub.image(NUM_CLASSES), ds.image(NUM_CLASSES));
        assert_eq!(ds.subset_per_class(100).len(), 95);
    }

    #[test]
    fn crop_identity_and_flip_involution() {
        let src: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0; 16];
        crop_and_flip(&src, &mut out, 4, 2, 4, 2, 2, false);
        assert_eq!(out, src);
        let mut once = vec![0.0; 16];
        let mut twice = vec![0.0; 16];
        crop_and_flip(&src, &mut once, 4, 2, 4, 2, 2, true);
        assert_eq!(&once[..4], &[3.0, 2.0, 1.0, 0.0]);
        crop_and_flip(&once, &mut twice, 4, 2, 4, 2, 2, true);
        assert_eq!(twice, src);
        // Offset (0, 0) shows the top-left padding.
        crop_and_flip(&src, &mut out, 4, 2, 4, 0, 0, false);
        assert_eq!(&out[..4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(out[2 * 4 + 2], src[0]);
    }

    #[test]
    fn batch_sizes_and_determinism() {
        let ds = Dataset::synthetic(10, 0, Split::Train);
        let b = batches(&ds, 3, 5, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3, 1]);
        assert_eq!(b, batches(&ds, 3, 5, 0).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!((1..6).any(|e| batches(&ds, 3, 5, e).unwrap() != b));
        assert!(matches!(batches(&ds, 0, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn augmentation_is_deterministic_and_keeps_labels() {
        let ds = Dataset::synthetic(8, 1, Split::Train);
        let batch = ds.gather::<f32>(&[0, 3, 5, 7]).unwrap();
        let p = AugmentPolicy::cifar(9);
        let a = augment_batch(&batch, &p, 2, 1).unwrap();
        assert_eq!(a, augment_batch(&batch, &p, 2, 1).unwrap());
        assert_ne!(a, augment_batch(&batch, &p, 3, 1).unwrap());
        assert_eq!(a.labels, batch.labels);
        assert_eq!(a.images.dims(), batch.images.dims());
        // Without crop or flip the augmentation is plain normalisation.
        let plain = augment_batch(&batch, &p.normalize_only(), 0, 0).unwrap();
        assert_eq!(plain, normalize_batch(&batch, &p));
    }

    #[test]
    fn normalised_statistics_are_centred() {
        let ds = Dataset::synthetic(200, 4, Split::Train);
        let (mean, std) = ds.channel_stats();
        let p = AugmentPolicy { mean, std, ..AugmentPolicy::cifar(0) };
        let idx: Vec<usize> = (0..ds.len()).collect();
        let b = normalize_batch(&ds.gather::<f64>(&idx).unwrap(), &p);
        let plane = SIDE * SIDE;
        for c in 0..3 {
            let vals: Vec<f64> = b.images.data().chunks_exact(plane).skip(c).step_by(3).flatten().copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-9, "{m}");
            assert!((v.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn round_trip_synthetic_files(len in 1usize..30, seed in any::<u64>()) {
            let dir = tempfile::tempdir().unwrap();
            let ds = Dataset::synthetic(len, seed, Split::Test);
            ds.write_bin(&dir.path().join("test_batch.bin")).unwrap();
            prop_assert_eq!(load_cifar10(dir.path(), Split::Test).unwrap(), ds);
        }

        #[test]
        fn batches_partition_the_dataset(len in 1usize..200, bs in 1usize..50, seed in any::<u64>(), epoch in 0usize..1000) {
            let ds = Dataset::synthetic(len, 0, Split::Train);
            let b = batches(&ds, bs, seed, epoch).unwrap();
            prop_assert_eq!(b.len(), len.div_ceil(bs));
            let mut all = b.concat();
            all.sort();
            prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        }
    }
}
