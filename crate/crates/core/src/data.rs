//! Image datasets: the CIFAR-10 binary format and a procedural stand-in.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LhcError, Result};
use crate::tensor::Tensor4;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by three 32x32 colour planes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images `[n, h, w, c]` scaled to `[0, 1]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor4,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = images.dims()[0];
        if labels.len() != n {
            return Err(LhcError::shape(&[n], &[labels.len()]));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(LhcError::InvalidArgument(format!(
                "label {l} outside {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[h, w, c]` of one image.
    pub fn image_dims(&self) -> [usize; 3] {
        let [_, h, w, c] = self.images.dims();
        [h, w, c]
    }

    /// Samples `idx` in the given order.
    pub fn gather(&self, idx: &[usize]) -> (Tensor4, Vec<usize>) {
        let [h, w, c] = self.image_dims();
        let per = h * w * c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let images = Tensor4::new([idx.len(), h, w, c], data).expect("gathered sizes agree");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive batches of at most `batch` samples in stored order.
    pub fn batches(&self, batch: usize) -> impl Iterator<Item = (Tensor4, Vec<usize>)> + '_ {
        let batch = batch.max(1);
        (0..self.len())
            .step_by(batch)
            .map(move |s| self.gather(&(s..(s + batch).min(self.len())).collect::<Vec<_>>()))
    }

    /// Splits off the first `n` samples.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let (a, _) = self.gather(&(0..n).collect::<Vec<_>>());
        let (b, _) = self.gather(&(n..self.len()).collect::<Vec<_>>());
        (
            Dataset {
                images: a,
                labels: self.labels[..n].to_vec(),
                classes: self.classes,
            },
            Dataset {
                images: b,
                labels: self.labels[n..].to_vec(),
                classes: self.classes,
            },
        )
    }

    /// A fresh permutation of sample indices.
    pub fn shuffled_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }
}

/// Decodes CIFAR-10 binary records. `cap` limits the number of records read.
pub fn parse_cifar10(bytes: &[u8], cap: Option<usize>) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) && cap.is_none_or(|c| c > whole) {
        let at = whole * CIFAR_RECORD;
        return Err(LhcError::parse(
            at,
            format!(
                "truncated record {whole}: {} of {CIFAR_RECORD} bytes",
                bytes.len() - at
            ),
        ));
    }
    let n = cap.map_or(whole, |c| c.min(whole));
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut data = vec![0.0; n * 3 * plane];
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(LhcError::parse(
                r * CIFAR_RECORD,
                format!("label byte {label} is not a CIFAR-10 class"),
            ));
        }
        labels.push(label);
        for ch in 0..3 {
            for p in 0..plane {
                data[(r * plane + p) * 3 + ch] = rec[1 + ch * plane + p] as f64 / 255.0;
            }
        }
    }
    let images = Tensor4::new([n, CIFAR_SIDE, CIFAR_SIDE, 3], data)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

/// Reads one CIFAR-10 batch file, or every `*.bin` file of a directory in
/// name order.
pub fn load_cifar10(path: &Path, cap: Option<usize>) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut v: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(LhcError::InvalidArgument(format!(
                "no .bin files in {}",
                path.display()
            )));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in files {
        let chunk = fs::read(&f)?;
        if chunk.len() % CIFAR_RECORD != 0 {
            // Report the offset within the offending file.
            parse_cifar10(&chunk, None)?;
        }
        bytes.extend_from_slice(&chunk);
        if cap.is_some_and(|c| bytes.len() / CIFAR_RECORD >= c) {
            break;
        }
    }
    parse_cifar10(&bytes, cap)
}

/// Oriented gratings, one orientation, spatial frequency and colour tint per
/// class, with random phase, contrast and pixel noise per sample. The same
/// arguments always produce the same bytes.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes == 0 || size == 0 {
        return Err(LhcError::InvalidArgument(
            "synthetic set needs at least one class and pixel".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent: Vec<(f64, f64, [f64; 3])> = (0..classes)
        .map(|c| {
            let theta = PI * c as f64 / classes as f64;
            let freq = 2.0 + (c % 3) as f64;
            let tint = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            (theta, freq, tint)
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * size * size * 3);
    for i in 0..n {
        let label = i % classes;
        let (theta, freq, tint) = latent[label];
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.25..0.45);
        let jitter = rng.random_range(-0.1..0.1);
        let (s, c) = (theta + jitter).sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * c + y as f64 * s) / size as f64;
                let g = (2.0 * PI * freq * u + phase).sin();
                for t in tint {
                    let noise: f64 = rng.random_range(-0.15..0.15);
                    let v = 0.5 + contrast * g + 0.05 * t + noise;
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    // Interleaved labels keep every prefix class-balanced; shuffle so that
    // batches are not periodic in the label.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let images = Tensor4::new([n, size, size, 3], data)?;
    let ds = Dataset::new(images, labels, classes)?;
    let (images, labels) = ds.gather(&order);
    Dataset::new(images, labels, classes)
}

/// Random horizontal flip and integer translation with zero fill, applied
/// per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augment {
    pub flip: bool,
    /// Maximum shift in pixels along each axis.
    pub translate: usize,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.translate == 0
    }

    pub fn apply<R: Rng + ?Sized>(&self, images: &Tensor4, rng: &mut R) -> Tensor4 {
        if self.is_identity() {
            return images.clone();
        }
        let [b, h, w, c] = images.dims();
        let mut out = Tensor4::zeros([b, h, w, c]);
        let t = self.translate as i64;
        for n in 0..b {
            let flip = self.flip && rng.random::<bool>();
            let (dy, dx) = if t > 0 {
                (rng.random_range(-t..=t) as isize, rng.random_range(-t..=t) as isize)
            } else {
                (0, 0)
            };
            for y in 0..h {
                let sy = y as isize - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let mut sx = x as isize - dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    if flip {
                        sx = w as isize - 1 - sx;
                    }
                    for ch in 0..c {
                        out.set(
                            [n, y, x, ch],
                            images.at([n, sy as usize, sx as usize, ch]),
                        );
                    }
                }
            }
        }
        out
    }
}
