//! Image datasets: IDX (MNIST-style) and CIFAR-10 binary batches, per-channel
//! normalization, deterministic shuffling and light augmentation.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_ROW_BYTES: usize = 1 + 3 * 32 * 32;

/// Raw 8-bit images, `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path.display().to_string(), 0, format!("gzip stream is corrupt ({e})")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, ctx: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(ctx, offset as u64, "truncated header"))
}

/// Parses an IDX image file (`magic 0x00000803`, then N, rows, cols).
pub fn parse_idx_images(bytes: &[u8], ctx: &str) -> Result<RawImages> {
    let magic = be_u32(bytes, 0, ctx)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ctx, 0, format!("expected image magic 0x{IDX_IMAGES_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, ctx)? as usize;
    let h = be_u32(bytes, 8, ctx)? as usize;
    let w = be_u32(bytes, 12, ctx)? as usize;
    let need = n.checked_mul(h * w).ok_or_else(|| Error::format(ctx, 4, "implausible extents"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            ctx,
            (16 + body.len()) as u64,
            format!("truncated: {n} images of {h}x{w} need {need} bytes, found {}", body.len()),
        ));
    }
    Ok(RawImages {
        n,
        channels: 1,
        height: h,
        width: w,
        pixels: body[..need].to_vec(),
    })
}

/// Parses an IDX label file (`magic 0x00000801`, then N).
pub fn parse_idx_labels(bytes: &[u8], ctx: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, ctx)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(ctx, 0, format!("expected label magic 0x{IDX_LABELS_MAGIC:08x}, found 0x{magic:08x}")));
    }
    let n = be_u32(bytes, 4, ctx)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(ctx, (8 + body.len()) as u64, format!("truncated: expected {n} labels")));
    }
    Ok(body[..n].to_vec())
}

/// Parses one CIFAR-10 binary batch: rows of 1 label byte + 3072 pixel bytes.
pub fn parse_cifar10(bytes: &[u8], ctx: &str) -> Result<(RawImages, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_ROW_BYTES) {
        let whole = bytes.len() / CIFAR_ROW_BYTES * CIFAR_ROW_BYTES;
        return Err(Error::format(ctx, whole as u64, format!("length {} is not a multiple of {CIFAR_ROW_BYTES}", bytes.len())));
    }
    let n = bytes.len() / CIFAR_ROW_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_ROW_BYTES - 1));
    for (i, row) in bytes.chunks_exact(CIFAR_ROW_BYTES).enumerate() {
        if row[0] > 9 {
            return Err(Error::format(ctx, (i * CIFAR_ROW_BYTES) as u64, format!("label {} out of range", row[0])));
        }
        labels.push(row[0]);
        pixels.extend_from_slice(&row[1..]);
    }
    Ok((
        RawImages {
            n,
            channels: 3,
            height: 32,
            width: 32,
            pixels,
        },
        labels,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Idx,
    Cifar10,
}

/// Where a dataset lives and how to prepare it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub format: DatasetFormat,
    /// IDX: `[images, labels]`; CIFAR-10: batch files.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// Zero-pad images symmetrically up to this square size.
    pub pad_to: Option<usize>,
    pub augment_flip: bool,
    /// Pad-and-crop jitter in pixels.
    pub augment_crop: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

fn first_existing(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for s in stems {
        for cand in [dir.join(s), dir.join(format!("{s}.gz"))] {
            if cand.is_file() {
                return Ok(cand);
            }
        }
    }
    Err(Error::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}

impl DatasetSource {
    /// MNIST-style directory with `train-images-idx3-ubyte[.gz]` etc.;
    /// images are padded to 32×32 and never flipped.
    pub fn mnist_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            format: DatasetFormat::Idx,
            train: vec![
                first_existing(dir, &["train-images-idx3-ubyte", "train-images.idx3-ubyte"])?,
                first_existing(dir, &["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"])?,
            ],
            test: vec![
                first_existing(dir, &["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"])?,
                first_existing(dir, &["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"])?,
            ],
            pad_to: Some(32),
            augment_flip: false,
            augment_crop: 4,
            train_limit: None,
            test_limit: None,
        })
    }

    /// Directory with `data_batch_{1..5}.bin` and `test_batch.bin`.
    pub fn cifar10_dir(dir: &Path) -> Result<Self> {
        let train = (1..=5)
            .map(|i| first_existing(dir, &[&format!("data_batch_{i}.bin")]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: DatasetFormat::Cifar10,
            train,
            test: vec![first_existing(dir, &["test_batch.bin"])?],
            pad_to: None,
            augment_flip: true,
            augment_crop: 4,
            train_limit: None,
            test_limit: None,
        })
    }

    /// Picks the format from the files present in `dir`.
    pub fn detect(dir: &Path) -> Result<Self> {
        Self::mnist_dir(dir).or_else(|_| Self::cifar10_dir(dir))
    }

    fn read_split(&self, files: &[PathBuf]) -> Result<(RawImages, Vec<u8>)> {
        match self.format {
            DatasetFormat::Idx => {
                let [img, lab] = files else {
                    return Err(Error::invalid("IDX splits need exactly an image file and a label file"));
                };
                let images = parse_idx_images(&read_file(img)?, &img.display().to_string())?;
                let labels = parse_idx_labels(&read_file(lab)?, &lab.display().to_string())?;
                if images.n != labels.len() {
                    return Err(Error::format(
                        lab.display().to_string(),
                        4,
                        format!("{} labels for {} images", labels.len(), images.n),
                    ));
                }
                Ok((images, labels))
            }
            DatasetFormat::Cifar10 => {
                let mut all: Option<RawImages> = None;
                let mut labels = Vec::new();
                for f in files {
                    let (im, lab) = parse_cifar10(&read_file(f)?, &f.display().to_string())?;
                    labels.extend(lab);
                    match &mut all {
                        Some(a) => {
                            a.n += im.n;
                            a.pixels.extend(im.pixels);
                        }
                        None => all = Some(im),
                    }
                }
                Ok((all.ok_or_else(|| Error::invalid("no CIFAR-10 batch files given"))?, labels))
            }
        }
    }

    /// Loads both splits; normalization statistics come from the training split.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        self.load_with(None).map(|(tr, te, _)| (tr, te))
    }

    /// Loads both splits, normalizing with `norm` when given and with
    /// statistics fitted on the training split otherwise.
    pub fn load_with(&self, norm: Option<&Normalization>) -> Result<(Dataset, Dataset, Normalization)> {
        let (mut tr_img, mut tr_lab) = self.read_split(&self.train)?;
        let (mut te_img, mut te_lab) = self.read_split(&self.test)?;
        truncate(&mut tr_img, &mut tr_lab, self.train_limit);
        truncate(&mut te_img, &mut te_lab, self.test_limit);
        if let Some(s) = self.pad_to {
            tr_img = pad_images(&tr_img, s)?;
            te_img = pad_images(&te_img, s)?;
        }
        let norm = norm.cloned().unwrap_or_else(|| Normalization::fit(&tr_img));
        let aug = Augment {
            flip: self.augment_flip,
            crop: self.augment_crop,
        };
        let train = Dataset::new(&tr_img, tr_lab, &norm, aug)?;
        let test = Dataset::new(&te_img, te_lab, &norm, aug)?;
        Ok((train, test, norm))
    }
}

fn truncate(img: &mut RawImages, labels: &mut Vec<u8>, limit: Option<usize>) {
    if let Some(l) = limit {
        if l < img.n {
            img.n = l;
            img.pixels.truncate(l * img.channels * img.height * img.width);
            labels.truncate(l);
        }
    }
}

/// Centres images inside a `size×size` zero canvas.
pub fn pad_images(img: &RawImages, size: usize) -> Result<RawImages> {
    if img.height > size || img.width > size {
        return Err(Error::invalid(format!(
            "cannot pad {}x{} images down to {size}",
            img.height, img.width
        )));
    }
    let (top, left) = ((size - img.height) / 2, (size - img.width) / 2);
    let mut pixels = vec![0u8; img.n * img.channels * size * size];
    for plane in 0..img.n * img.channels {
        for y in 0..img.height {
            let src = (plane * img.height + y) * img.width;
            let dst = (plane * size + y + top) * size + left;
            pixels[dst..dst + img.width].copy_from_slice(&img.pixels[src..src + img.width]);
        }
    }
    Ok(RawImages {
        n: img.n,
        channels: img.channels,
        height: size,
        width: size,
        pixels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Per-channel mean and standard deviation of pixel values in `[0, 1]`.
    pub fn fit(img: &RawImages) -> Self {
        let plane = img.height * img.width;
        let mut mean = vec![0.0; img.channels];
        let mut sq = vec![0.0; img.channels];
        for (i, chunk) in img.pixels.chunks_exact(plane).enumerate() {
            let c = i % img.channels;
            for &p in chunk {
                let v = p as f64 / 255.0;
                mean[c] += v;
                sq[c] += v * v;
            }
        }
        let count = (img.n * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(1e-12).sqrt()
            })
            .collect();
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub crop: usize,
}

/// Normalized images held in memory as `[N, C, H, W]` f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    /// Normalized value of a black pixel, per channel.
    pub fill: Vec<f32>,
    pub augment: Augment,
}

impl Dataset {
    pub fn new(img: &RawImages, labels: Vec<u8>, norm: &Normalization, augment: Augment) -> Result<Self> {
        if img.n != labels.len() {
            return Err(Error::invalid(format!("{} labels for {} images", labels.len(), img.n)));
        }
        if norm.mean.len() != img.channels {
            return Err(Error::invalid("normalization does not match the channel count"));
        }
        let plane = img.height * img.width;
        let images = img
            .pixels
            .chunks_exact(plane)
            .enumerate()
            .flat_map(|(i, chunk)| {
                let c = i % img.channels;
                let (m, s) = (norm.mean[c], norm.std[c]);
                chunk.iter().map(move |&p| ((p as f64 / 255.0 - m) / s) as f32)
            })
            .collect();
        let fill = norm.mean.iter().zip(&norm.std).map(|(m, s)| (-m / s) as f32).collect();
        Ok(Self {
            n: img.n,
            channels: img.channels,
            height: img.height,
            width: img.width,
            images,
            num_classes: labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10),
            labels,
            fill,
            augment,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Stacks the given samples; with `rng`, applies pad-and-crop jitter and
    /// (if enabled) random horizontal flips.
    pub fn batch(&self, indices: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<(FloatTensor<f32>, Vec<usize>)> {
        let (c, h, w, len) = (self.channels, self.height, self.width, self.sample_len());
        let mut out = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::invalid(format!("sample {i} out of range for {} samples", self.n)));
            }
            let src = &self.images[i * len..(i + 1) * len];
            labels.push(self.labels[i] as usize);
            let Some(rng) = rng.as_deref_mut() else {
                out.extend_from_slice(src);
                continue;
            };
            let pad = self.augment.crop as isize;
            let (dy, dx) = if pad > 0 {
                (rng.gen_range(-pad..=pad), rng.gen_range(-pad..=pad))
            } else {
                (0, 0)
            };
            let flip = self.augment.flip && rng.gen::<bool>();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                        let sx = sx0 + dx;
                        let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            src[(ch * h + sy as usize) * w + sx as usize]
                        } else {
                            self.fill[ch]
                        };
                        out.push(v);
                    }
                }
            }
        }
        Ok((FloatTensor::new(&[indices.len(), c, h, w], out)?, labels))
    }
}

/// Random stream for `(seed, epoch)`: shuffling, then augmentation draws.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    rng
}

/// Deterministic permutation of `0..n` for an epoch (Fisher–Yates).
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..n * h * w).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_layout() {
        let b = idx_images(2, 3, 4);
        let img = parse_idx_images(&b, "t").unwrap();
        assert_eq!((img.n, img.height, img.width), (2, 3, 4));
        assert_eq!(img.pixels[5], 5);
        assert!(matches!(parse_idx_images(&b[..b.len() - 1], "t"), Err(Error::Format { .. })));
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        assert_eq!(parse_idx_labels(&lab, "l").unwrap(), vec![7, 3]);
        assert!(matches!(parse_idx_images(&lab, "l"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn cifar_row_layout() {
        let mut b = vec![3u8];
        b.extend((0..3072).map(|i| (i / 1024) as u8));
        let (img, lab) = parse_cifar10(&b, "c").unwrap();
        assert_eq!(lab, vec![3]);
        assert_eq!((img.channels, img.pixels[0], img.pixels[1024], img.pixels[3071]), (3, 0, 1, 2));
        assert!(parse_cifar10(&b[..3000], "c").is_err());
    }

    #[test]
    fn padding_centres_the_image() {
        let img = RawImages { n: 1, channels: 1, height: 2, width: 2, pixels: vec![1, 2, 3, 4] };
        let p = pad_images(&img, 4).unwrap();
        assert_eq!(p.pixels, vec![0, 0, 0, 0, 0, 1, 2, 0, 0, 3, 4, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn normalization_standardizes() {
        let img = RawImages { n: 2, channels: 1, height: 1, width: 2, pixels: vec![0, 255, 0, 255] };
        let d = Dataset::new(&img, vec![0, 1], &Normalization::fit(&img), Augment { flip: false, crop: 0 }).unwrap();
        for (v, e) in d.images.iter().zip([-1.0f32, 1.0, -1.0, 1.0]) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn same_seed_same_batch() {
        let img = RawImages { n: 20, channels: 1, height: 6, width: 6, pixels: (0..720).map(|i| (i % 251) as u8).collect() };
        let d = Dataset::new(&img, vec![1; 20], &Normalization::fit(&img), Augment { flip: true, crop: 2 }).unwrap();
        let run = || {
            let mut rng = epoch_rng(42, 3);
            let order = shuffled(d.len(), &mut rng);
            d.batch(&order[..8], Some(&mut rng)).unwrap()
        };
        assert_eq!(run(), run());
        let mut other = epoch_rng(42, 4);
        assert_ne!(shuffled(20, &mut other), shuffled(20, &mut epoch_rng(42, 3)));
    }
}
