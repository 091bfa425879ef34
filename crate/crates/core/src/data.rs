//! CIFAR-10 binary batches, MNIST IDX files, and batching with augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::hex_digest;
use crate::error::{Error, Result};
use crate::rng::{substream, STREAM_SPLIT};
use crate::tensor::Tensor;

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Random crop padding used by the standard augmentation.
pub const CROP_PAD: usize = 4;

/// Images kept as raw bytes in CHW order; normalization happens per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// `(file, sha256)` of every source file.
    pub digests: Vec<(String, String)>,
}

/// Augmentation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub crop: bool,
    pub flip: bool,
}

impl Augment {
    pub const NONE: Augment = Augment {
        crop: false,
        flip: false,
    };
    pub const STANDARD: Augment = Augment {
        crop: true,
        flip: true,
    };

    pub fn any(&self) -> bool {
        self.crop || self.flip
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let l = self.item_len();
        &self.images[i * l..(i + 1) * l]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.item_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            digests: self.digests.clone(),
            name: self.name.clone(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            ..*self
        }
    }

    /// First `n` examples (all when `n` exceeds the size).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// Half/half split of a seeded shuffle: `(train, val)` index lists.
    pub fn search_split(&self, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.len() < 2 {
            return Err(Error::EmptyDataset(format!(
                "{} has {} examples; the search split needs at least 2",
                self.name,
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut substream(seed, STREAM_SPLIT));
        let val = idx.split_off(idx.len() / 2);
        Ok((idx, val))
    }

    /// Normalized `(B, C, H, W)` batch plus labels.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        augment: Augment,
        rng: &mut R,
    ) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut out = Vec::with_capacity(indices.len() * self.item_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.image(i);
            let (dy, dx) = if augment.crop {
                (
                    rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize,
                    rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize,
                )
            } else {
                (0, 0)
            };
            let flip = augment.flip && rng.gen_bool(0.5);
            for ci in 0..c {
                let (m, s) = (self.mean[ci], self.std[ci]);
                for y in 0..h {
                    for x in 0..w {
                        let xs = if flip { w - 1 - x } else { x } as isize + dx;
                        let ys = y as isize + dy;
                        // out-of-image pixels are black before normalization
                        let raw = if ys < 0 || xs < 0 || ys >= h as isize || xs >= w as isize {
                            0u8
                        } else {
                            img[(ci * h + ys as usize) * w + xs as usize]
                        };
                        out.push((raw as f32 / 255.0 - m) / s);
                    }
                }
            }
            labels.push(self.labels[i] as usize);
        }
        (
            Tensor::new([indices.len(), c, h, w], out).expect("batch size matches"),
            labels,
        )
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn digest(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes in
/// R, G, B planes of 32x32.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let len = bytes.len();
    if len % CIFAR_RECORD != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            len: len as u64,
            record: CIFAR_RECORD as u64,
            offset: (len / CIFAR_RECORD * CIFAR_RECORD) as u64,
        });
    }
    let n = len / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "label {} at byte offset {} is not in 0..10",
                    rec[0],
                    r * CIFAR_RECORD
                ),
            });
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok((images, labels))
}

fn cifar_from_files(dir: &Path, files: &[&str], name: &str) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut digests = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = read(&path)?;
        let (im, lb) = parse_cifar_records(&bytes, &path)?;
        images.extend(im);
        labels.extend(lb);
        digests.push((f.to_string(), digest(&bytes)));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} in {}",
            name,
            dir.display()
        )));
    }
    Ok(Dataset {
        name: name.to_string(),
        channels: 3,
        height: 32,
        width: 32,
        images,
        labels,
        num_classes: 10,
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
        digests,
    })
}

/// `(train, test)` from the five training batches and the test batch.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        cifar_from_files(dir, &CIFAR_TRAIN_FILES, "cifar10-train")?,
        cifar_from_files(dir, &[CIFAR_TEST_FILE], "cifar10-test")?,
    ))
}

/// Directory from `BNAS_CIFAR10_DIR`, else `data/cifar-10-batches-bin`.
pub fn default_cifar10_dir() -> PathBuf {
    std::env::var_os("BNAS_CIFAR10_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/cifar-10-batches-bin"))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: 4,
            offset: at as u64,
        })
}

fn check_magic(bytes: &[u8], want: u32, path: &Path) -> Result<()> {
    let got = be_u32(bytes, 0, path)?;
    if got != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "bad IDX magic: expected {:#010x}, found {:#010x}",
                want, got
            ),
        });
    }
    Ok(())
}

/// `(count, rows, cols, pixels)` of an IDX image file.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected {} bytes for {}x{}x{} images, found {}",
                want,
                n,
                rows,
                cols,
                bytes.len()
            ),
        });
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {} label bytes, found {}", n, bytes.len() - 8),
        });
    }
    if let Some(p) = bytes[8..].iter().position(|&l| l >= 10) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "label {} at byte offset {} is not in 0..10",
                bytes[8 + p],
                8 + p
            ),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn mnist_split(
    dir: &Path,
    images_file: &str,
    labels_file: &str,
    name: &str,
    size: usize,
) -> Result<Dataset> {
    let ip = dir.join(images_file);
    let lp = dir.join(labels_file);
    let ib = read(&ip)?;
    let lb = read(&lp)?;
    let (n, rows, cols, pixels) = parse_idx_images(&ib, &ip)?;
    let labels = parse_idx_labels(&lb, &lp)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: lp,
            msg: format!("{} labels for {} images", labels.len(), n),
        });
    }
    if rows > size || cols > size {
        return Err(Error::Config(format!(
            "{}x{} images do not fit the {}x{} input",
            rows, cols, size, size
        )));
    }
    // centre each image on a zero canvas of the target size
    let (oy, ox) = ((size - rows) / 2, (size - cols) / 2);
    let mut images_out = vec![0u8; n * size * size];
    for i in 0..n {
        for y in 0..rows {
            let src = &pixels[(i * rows + y) * cols..(i * rows + y + 1) * cols];
            let at = (i * size + oy + y) * size + ox;
            images_out[at..at + cols].copy_from_slice(src);
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset(format!(
            "{} in {}",
            name,
            dir.display()
        )));
    }
    Ok(Dataset {
        name: name.to_string(),
        channels: 1,
        height: size,
        width: size,
        images: images_out,
        labels,
        num_classes: 10,
        mean: vec![MNIST_MEAN],
        std: vec![MNIST_STD],
        digests: vec![
            (images_file.to_string(), digest(&ib)),
            (labels_file.to_string(), digest(&lb)),
        ],
    })
}

/// `(train, test)` MNIST padded to `size x size`.
pub fn load_mnist(dir: &Path, size: usize) -> Result<(Dataset, Dataset)> {
    Ok((
        mnist_split(
            dir,
            "train-images-idx3-ubyte",
            "train-labels-idx1-ubyte",
            "mnist-train",
            size,
        )?,
        mnist_split(
            dir,
            "t10k-images-idx3-ubyte",
            "t10k-labels-idx1-ubyte",
            "mnist-test",
            size,
        )?,
    ))
}

/// Class-dependent random images for smoke runs and tests: each class has a
/// fixed mean colour pattern plus uniform noise.
pub fn synthetic(n: usize, channels: usize, size: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = substream(seed, 99);
    let item = channels * size * size;
    let protos: Vec<Vec<u8>> = (0..classes)
        .map(|_| (0..item).map(|_| rng.gen_range(32..224)).collect())
        .collect();
    let mut images = Vec::with_capacity(n * item);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = i % classes;
        labels.push(l as u8);
        for &p in &protos[l] {
            let noise: i16 = rng.gen_range(-48..=48);
            images.push((p as i16 + noise).clamp(0, 255) as u8);
        }
    }
    Dataset {
        name: format!("synthetic-{seed}"),
        channels,
        height: size,
        width: size,
        images,
        labels,
        num_classes: classes,
        mean: vec![0.5; channels],
        std: vec![0.25; channels],
        digests: Vec::new(),
    }
}
