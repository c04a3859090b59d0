//! Dataset container, binary task sequencing and the synthetic generator.
//!
//! File layout (little-endian): magic `CLDS`, version `u16`, classes `u32`,
//! images per class `u32`, height `u16`, width `u16`, channels `u16`,
//! followed by `u8` pixels in class-major, image-major, CHW order.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CLDS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub n_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        n_classes: usize,
        per_class: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let want = n_classes * per_class * channels * height * width;
        if pixels.len() != want {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header implies {want}",
                pixels.len()
            )));
        }
        Ok(Dataset {
            n_classes,
            per_class,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Raw bytes of image `idx` of `class`.
    pub fn image(&self, class: usize, idx: usize) -> &[u8] {
        let n = self.image_len();
        let start = (class * self.per_class + idx) * n;
        &self.pixels[start..start + n]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.per_class as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.channels as u16).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("file too short for a header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let version = u16_at(4);
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Dataset::new(
            u32_at(6),
            u32_at(10),
            u16_at(14),
            u16_at(16),
            u16_at(18),
            bytes[HEADER_LEN..].to_vec(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Images held out for testing per class: one seventh (600/100 of 700).
    pub fn test_per_class(&self) -> usize {
        (self.per_class / 7).max(1)
    }

    pub fn train_per_class(&self) -> usize {
        self.per_class - self.test_per_class()
    }
}

/// Images and binary labels of one split of one task.
#[derive(Debug, Clone)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let n: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let shape = [idx.len(), s[1], s[2], s[3]];
        (
            Tensor::from_vec(&shape, data).expect("gathered shape"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` examples in storage order.
    pub fn head(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.gather(&idx)
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub index: usize,
    /// Class labelled 0, class labelled 1.
    pub classes: (usize, usize),
    pub train: Split,
    pub test: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub seed: u64,
    pub n_tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            seed: 0,
            n_tasks: 5000,
            epochs: 250,
            batch_size: 100,
        }
    }
}

/// A seeded sequence of class pairs over a dataset.
#[derive(Debug, Clone)]
pub struct TaskStream<'a> {
    dataset: &'a Dataset,
    config: StreamConfig,
    pairs: Vec<(usize, usize)>,
}

/// Class pairs for `n_tasks` tasks: each cycle pairs consecutive entries of
/// a fresh seeded permutation.
pub fn class_pairs(n_classes: usize, n_tasks: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, dataset has {n_classes}")));
    }
    if n_classes % 2 == 1 {
        warn!("odd class count {n_classes}: the last class of each cycle's permutation is skipped");
    }
    let per_cycle = n_classes / 2;
    let mut pairs = Vec::with_capacity(n_tasks);
    let mut cycle = 0u64;
    while pairs.len() < n_tasks {
        let mut perm: Vec<usize> = (0..n_classes).collect();
        perm.shuffle(&mut rng_for(seed, "pairs", &[cycle]));
        for p in perm.chunks_exact(2).take(per_cycle) {
            if pairs.len() == n_tasks {
                break;
            }
            pairs.push((p[0], p[1]));
        }
        cycle += 1;
    }
    Ok(pairs)
}

impl<'a> TaskStream<'a> {
    pub fn new(dataset: &'a Dataset, config: StreamConfig) -> Result<Self> {
        if dataset.per_class < 2 {
            return Err(Error::Config("need at least 2 images per class for a train/test split".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("stream.batch must be positive".into()));
        }
        let train = 2 * dataset.train_per_class();
        if config.batch_size > train {
            return Err(Error::Config(format!(
                "stream.batch {} exceeds the {train} training images of a task",
                config.batch_size
            )));
        }
        let pairs = class_pairs(dataset.n_classes, config.n_tasks, config.seed)?;
        Ok(TaskStream { dataset, config, pairs })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Materialize task `n`: the first images of each class train, the last test.
    pub fn task(&self, n: usize) -> Task {
        let (a, b) = self.pairs[n];
        let d = self.dataset;
        let n_train = d.train_per_class();
        let split = |range: std::ops::Range<usize>| {
            let per = range.len();
            let mut data = Vec::with_capacity(2 * per * d.image_len());
            let mut labels = Vec::with_capacity(2 * per);
            for (label, class) in [(0, a), (1, b)] {
                for i in range.clone() {
                    data.extend(d.image(class, i).iter().map(|&p| f64::from(p) / 255.0));
                    labels.push(label);
                }
            }
            Split {
                images: Tensor::from_vec(&[2 * per, d.channels, d.height, d.width], data).expect("split shape"),
                labels,
            }
        };
        Task {
            index: n,
            classes: (a, b),
            train: split(0..n_train),
            test: split(n_train..d.per_class),
        }
    }
}

/// Shuffled minibatches of the task's training split; the final short batch is kept.
pub fn batches(task: &Task, epoch: usize, seed: u64, batch_size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(&mut rng_for(seed, "shuffle", &[task.index as u64, epoch as u64]));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| task.train.gather(&idx))
}

/// Difficulty knobs of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Sinusoid components per texture.
    pub components: usize,
    /// Frequency band of components, in cycles per image side.
    pub freq: (f64, f64),
    /// Maximum per-image shift of the class texture, in pixels.
    pub max_shift: f64,
    pub contrast_jitter: f64,
    /// Weight of a per-image texture unrelated to the class.
    pub distractor: f64,
    /// Standard deviation of additive pixel noise (pixel range is [0, 1]).
    pub pixel_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            components: 6,
            freq: (0.5, 3.0),
            max_shift: 2.0,
            contrast_jitter: 0.25,
            distractor: 1.5,
            pixel_noise: 0.3,
        }
    }
}

struct Component {
    fx: f64,
    fy: f64,
    phase: f64,
    color: Vec<f64>,
}

fn random_texture(rng: &mut impl Rng, channels: usize, p: &SynthParams) -> Vec<Component> {
    (0..p.components)
        .map(|_| {
            let mag = rng.random_range(p.freq.0..p.freq.1);
            let angle = rng.random_range(0.0..PI);
            Component {
                fx: mag * angle.cos(),
                fy: mag * angle.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                color: (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

fn render(proto: &[Component], c: usize, y: f64, x: f64, h: usize, w: usize) -> f64 {
    let norm = 1.0 / (proto.len() as f64).sqrt();
    proto
        .iter()
        .map(|k| k.color[c] * (2.0 * PI * (k.fx * x / w as f64 + k.fy * y / h as f64) + k.phase).cos())
        .sum::<f64>()
        * norm
}

/// Seeded synthetic dataset with default difficulty; see [`generate_synthetic_with`].
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_synthetic_with(n_classes, per_class, height, width, channels, seed, &SynthParams::default())
}

/// Each class is a band-limited texture prototype; each image is that
/// prototype shifted, contrast-jittered, blended with a random distractor
/// texture and corrupted with pixel noise.
pub fn generate_synthetic_with(
    n_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    p: &SynthParams,
) -> Result<Dataset> {
    if n_classes == 0 || per_class == 0 || height == 0 || width == 0 || channels == 0 || p.components == 0 {
        return Err(Error::Config("synthetic dataset parameters must be positive".into()));
    }
    let noise = Normal::new(0.0, p.pixel_noise)
        .map_err(|_| Error::Config(format!("invalid pixel noise {}", p.pixel_noise)))?;
    let mut pixels = Vec::with_capacity(n_classes * per_class * channels * height * width);
    for class in 0..n_classes {
        let proto = random_texture(&mut rng_for(seed, "prototype", &[class as u64]), channels, p);
        for i in 0..per_class {
            let mut rng = rng_for(seed, "image", &[class as u64, i as u64]);
            let dy = rng.random_range(-p.max_shift..=p.max_shift);
            let dx = rng.random_range(-p.max_shift..=p.max_shift);
            let contrast = 1.0 + rng.random_range(-p.contrast_jitter..=p.contrast_jitter);
            let distractor = random_texture(&mut rng, channels, p);
            for c in 0..channels {
                for y in 0..height {
                    for x in 0..width {
                        let signal = render(&proto, c, y as f64 + dy, x as f64 + dx, height, width);
                        let clutter = render(&distractor, c, y as f64, x as f64, height, width);
                        let v = 0.5 + 0.2 * (contrast * signal + p.distractor * clutter) + noise.sample(&mut rng);
                        pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
        }
    }
    Dataset::new(n_classes, per_class, height, width, channels, pixels)
}
