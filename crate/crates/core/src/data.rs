//! Labeled image datasets, deterministic splits, and the synthetic
//! oriented-grating task.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const DPDS_MAGIC: &[u8; 4] = b"DPDS";
const DPDS_VERSION: u32 = 1;

/// Images `[n, C, H, W]` in `[0, 1]` with labels in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

/// A minibatch: images plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("dataset", format!("images must be 4-D, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if num_classes == 0 {
            return Err(Error::Contract("dataset needs at least one class".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Contract("empty subset".into()));
        }
        let b = self.batch(indices);
        Dataset::new(b.images, b.labels, self.num_classes)
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            images: self.images.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + self.images.numel() * 8 + self.len() * 4);
        buf.extend_from_slice(DPDS_MAGIC);
        let [c, h, w] = self.image_shape();
        for v in [DPDS_VERSION, self.len() as u32, c as u32, h as u32, w as u32, self.num_classes as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.images.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            buf.extend_from_slice(&(y as u32).to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Dataset> {
        let fail = |msg: String| Error::format(origin, None, msg);
        if bytes.len() < 28 {
            return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != DPDS_MAGIC {
            return Err(fail(format!("bad magic {:?}, expected \"DPDS\"", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let version = word(0) as u32;
        if version != DPDS_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let (n, c, h, w, classes) = (word(1), word(2), word(3), word(4), word(5));
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(fail(format!("degenerate header n={n} c={c} h={h} w={w}")));
        }
        let pixels = n * c * h * w;
        let expected = 28 + pixels * 8 + n * 4;
        if bytes.len() != expected {
            return Err(fail(format!(
                "expected {expected} bytes for n={n}, found {}",
                bytes.len()
            )));
        }
        let body = &bytes[28..];
        let data: Vec<f64> = body[..pixels * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels: Vec<usize> = body[pixels * 8..]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .collect();
        let images = Tensor::new(&[n, c, h, w], data)?;
        Dataset::new(images, labels, classes).map_err(|e| fail(e.to_string()))
    }

    /// Reads `label,pixel,...` rows. Pixels are laid out as `C x H x W`.
    /// When `num_classes` is `None` it is one more than the largest label.
    pub fn import_csv(path: &Path, shape: [usize; 3], num_classes: Option<usize>) -> Result<Dataset> {
        let origin = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let per = shape.iter().product::<usize>();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != per + 1 {
                return Err(Error::format(
                    &origin,
                    Some(lineno + 1),
                    format!("expected {} fields, found {}", per + 1, fields.len()),
                ));
            }
            let label = fields[0]
                .parse::<usize>()
                .map_err(|e| Error::format(&origin, Some(lineno + 1), format!("label: {e}")))?;
            labels.push(label);
            for f in &fields[1..] {
                let v = f
                    .parse::<f64>()
                    .map_err(|e| Error::format(&origin, Some(lineno + 1), format!("pixel {f:?}: {e}")))?;
                data.push(v);
            }
        }
        if labels.is_empty() {
            return Err(Error::format(&origin, None, "no rows"));
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
        let images = Tensor::new(&[labels.len(), shape[0], shape[1], shape[2]], data)?;
        Dataset::new(images, labels, classes).map_err(|e| Error::format(&origin, None, e.to_string()))
    }
}

/// Disjoint train/validation halves of a dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

/// Seeded random split; the train side gets `round(n * ratio)` samples,
/// clamped so both sides are non-empty.
pub fn split(d: &Dataset, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = d.len();
    if n < 2 {
        return Err(Error::Contract(format!("cannot split {n} sample(s)")));
    }
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, Stream::Split));
    let mut train_indices = perm[..n_train].to_vec();
    let mut val_indices = perm[n_train..].to_vec();
    train_indices.sort_unstable();
    val_indices.sort_unstable();
    Ok(DatasetSplit {
        train: d.subset(&train_indices)?,
        val: d.subset(&val_indices)?,
        train_indices,
        val_indices,
        seed,
        ratio,
    })
}

/// Synthetic classification task: class `c` is a sinusoidal grating at
/// orientation `pi * c / num_classes`, drawn at one of four phases, plus
/// Gaussian pixel noise, clamped to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthTask {
    pub n: usize,
    pub num_classes: usize,
    pub size: usize,
    pub noise: f64,
    /// Grating frequency in cycles per image width.
    pub cycles: f64,
    pub seed: u64,
}

impl Default for SynthTask {
    fn default() -> Self {
        SynthTask {
            n: 4096,
            num_classes: 4,
            size: 16,
            noise: 0.05,
            cycles: 3.0,
            seed: 0,
        }
    }
}

/// Discrete phases a grating can take.
pub const SYNTH_PHASES: usize = 4;
const AMPLITUDE: f64 = 0.4;

impl SynthTask {
    /// Noise-free image for `(class, phase index)`, `size * size` values.
    pub fn template(&self, class: usize, phase: usize) -> Vec<f64> {
        let theta = PI * class as f64 / self.num_classes as f64;
        let phi = 2.0 * PI * phase as f64 / SYNTH_PHASES as f64;
        let (ct, st) = (theta.cos(), theta.sin());
        let k = 2.0 * PI * self.cycles / self.size as f64;
        let mut out = Vec::with_capacity(self.size * self.size);
        for y in 0..self.size {
            for x in 0..self.size {
                let u = x as f64 * ct + y as f64 * st;
                out.push(0.5 + AMPLITUDE * (k * u + phi).cos());
            }
        }
        out
    }

    /// Every class template, keyed by class.
    pub fn templates(&self) -> Vec<(usize, Vec<f64>)> {
        (0..self.num_classes)
            .flat_map(|c| (0..SYNTH_PHASES).map(move |p| (c, p)))
            .map(|(c, p)| (c, self.template(c, p)))
            .collect()
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.n == 0 || self.num_classes == 0 || self.size == 0 {
            return Err(Error::Config(format!(
                "synthetic task needs n, classes, size >= 1 (got {}, {}, {})",
                self.n, self.num_classes, self.size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be finite and >= 0", self.noise)));
        }
        let mut rng = rng::stream(self.seed, Stream::Data);
        let noise = Normal::new(0.0, self.noise).expect("checked noise");
        let bank: Vec<Vec<Vec<f64>>> = (0..self.num_classes)
            .map(|c| (0..SYNTH_PHASES).map(|p| self.template(c, p)).collect())
            .collect();
        let pixels = self.size * self.size;
        let mut data = Vec::with_capacity(self.n * pixels);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let class = i % self.num_classes;
            let phase = rng.random_range(0..SYNTH_PHASES);
            for &v in &bank[class][phase] {
                let jitter = if self.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((v + jitter).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
        let images = Tensor::new(&[self.n, 1, self.size, self.size], data)?;
        Dataset::new(images, labels, self.num_classes)
    }
}

/// Shorthand for [`SynthTask`] with default image size and frequency.
pub fn synth_task(n: usize, num_classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    SynthTask {
        n,
        num_classes,
        noise,
        seed,
        ..SynthTask::default()
    }
    .generate()
}

/// Cycles a seeded permutation of `0..n` in fixed-size batches, reshuffling
/// at every pass. The final short batch of a pass is dropped unless the
/// dataset is smaller than one batch.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: rand_chacha::ChaCha8Rng,
    epoch: usize,
}

impl BatchCycler {
    pub fn new(n: usize, batch: usize, rng: rand_chacha::ChaCha8Rng) -> Self {
        let mut c = BatchCycler {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.clamp(1, n.max(1)),
            rng,
            epoch: 0,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}
