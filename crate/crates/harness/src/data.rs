//! Labelled image sets: the CIFAR-10 binary format, a synthetic
//! texture-versus-shape generator, and the seeded 50/50 split.

use std::f64::consts::PI;
use std::path::Path;

use poolmix::rng::{Purpose, Stream};
use poolmix_cnn::Tensor4;

use crate::error::{io_err, HarnessError, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;

/// Images in NCHW layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.height()
    }

    pub fn channels(&self) -> usize {
        self.images.channels()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<ImageSet> {
        let (images, labels) = self.batch(indices)?;
        Ok(ImageSet {
            images,
            labels,
            num_classes: self.num_classes,
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4<f32>, Vec<usize>)> {
        let images = self.images.gather(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parses concatenated CIFAR-10 records: one label byte, then the red,
/// green and blue 32x32 planes, row-major. Errors carry a byte offset.
pub fn parse_cifar_binary(bytes: &[u8]) -> std::result::Result<ImageSet, (u64, String)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() - bytes.len() % CIFAR_RECORD) as u64;
        return Err((
            offset,
            format!(
                "length {} is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= NUM_CLASSES {
            return Err(((i * CIFAR_RECORD) as u64, format!("label {label} > 9")));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images =
        Tensor4::from_vec([n, 3, CIFAR_SIDE, CIFAR_SIDE], data).expect("record sizes checked");
    Ok(ImageSet {
        images,
        labels,
        num_classes: NUM_CLASSES,
    })
}

pub fn load_cifar_binary(path: &Path) -> Result<ImageSet> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    parse_cifar_binary(&bytes).map_err(|(offset, reason)| HarnessError::Cifar {
        path: path.to_path_buf(),
        offset,
        reason,
    })
}

/// What a synthetic class draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    /// Sinusoidal stripes with this many cycles across the image, random
    /// orientation and phase.
    Stripes { cycles: f64 },
    /// One Gaussian blob whose standard deviation is this fraction of the
    /// image side, at a random position.
    Blob { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthClass {
    pub pattern: Pattern,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

/// Generator parameters of the ten synthetic classes. Even labels are
/// textures of increasing frequency, odd labels are blobs of increasing size.
pub fn synth_classes() -> [SynthClass; NUM_CLASSES] {
    const CYCLES: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.5];
    const SCALES: [f64; 5] = [0.06, 0.1, 0.15, 0.22, 0.32];
    std::array::from_fn(|k| SynthClass {
        pattern: if k % 2 == 0 {
            Pattern::Stripes {
                cycles: CYCLES[k / 2],
            }
        } else {
            Pattern::Blob {
                scale: SCALES[k / 2],
            }
        },
        noise: 0.05,
    })
}

/// `n_per_class` images of every class, interleaved by class, with a
/// random colour tint per image.
pub fn synth_dataset(seed: u64, n_per_class: usize, size: usize) -> Result<ImageSet> {
    if n_per_class == 0 {
        return Err(HarnessError::Data(
            "synthetic dataset with zero images per class".into(),
        ));
    }
    if !matches!(size, 16 | 32) {
        return Err(HarnessError::Data(format!(
            "synthetic side must be 16 or 32, got {size}"
        )));
    }
    let classes = synth_classes();
    let mut rng = Stream::new(seed, Purpose::DataGen);
    let n = n_per_class * NUM_CLASSES;
    let plane = size * size;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    let s = size as f64;
    for _ in 0..n_per_class {
        for (label, class) in classes.iter().enumerate() {
            let tint: [f64; 3] = std::array::from_fn(|_| 0.6 + 0.4 * rng.uniform());
            let base: Vec<f64> = match class.pattern {
                Pattern::Stripes { cycles } => {
                    let theta = PI * rng.uniform();
                    let phase = 2.0 * PI * rng.uniform();
                    let (c, sn) = (theta.cos(), theta.sin());
                    (0..plane)
                        .map(|p| {
                            let (y, x) = ((p / size) as f64, (p % size) as f64);
                            0.5 + 0.4 * (2.0 * PI * cycles * (x * c + y * sn) / s + phase).sin()
                        })
                        .collect()
                }
                Pattern::Blob { scale } => {
                    let cy = s * (0.25 + 0.5 * rng.uniform());
                    let cx = s * (0.25 + 0.5 * rng.uniform());
                    let sd = scale * s;
                    (0..plane)
                        .map(|p| {
                            let (y, x) = ((p / size) as f64, (p % size) as f64);
                            let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                            0.1 + 0.8 * (-r2 / (2.0 * sd * sd)).exp()
                        })
                        .collect()
                }
            };
            for t in tint {
                for &b in &base {
                    let v = b * t + class.noise * rng.standard_normal();
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
            labels.push(label);
        }
    }
    let images = Tensor4::from_vec([n, 3, size, size], data)?;
    Ok(ImageSet {
        images,
        labels,
        num_classes: NUM_CLASSES,
    })
}

/// Seeded shuffle of `0..n` cut in half; the training half gets the extra
/// index when `n` is odd.
pub fn split_half(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Stream::new(seed, Purpose::DataSplit).shuffle(&mut idx);
    let val = idx.split_off(n.div_ceil(2));
    (idx, val)
}
