//! CIFAR-10 binary ingestion, normalisation, augmentation, resizing and
//! batched iteration.
//!
//! A CIFAR-10 binary file is a sequence of 3073-byte records: one label byte
//! followed by 1024 red, 1024 green and 1024 blue bytes, each plane row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const PIXELS_PER_RECORD: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const RECORD_LEN: usize = 1 + PIXELS_PER_RECORD;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.images.dims();
        (c, h, w)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        self.images.sample(i)
    }

    /// Images at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let (c, h, w) = self.image_dims();
        let samples: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor4::stack(&samples, c, h, w)?, labels))
    }

    /// The first `n` samples (all of them when `n ≥ len`).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::EmptyData);
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx)?;
        Dataset::new(images, labels, self.split)
    }
}

fn data_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Decodes whole records, scaling pixels to `[0, 1]`.
pub fn parse_records(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        let at = bytes.len() - bytes.len() % RECORD_LEN;
        return Err(data_err(
            path,
            at,
            format!(
                "truncated record: {} trailing bytes, records are {RECORD_LEN} bytes",
                bytes.len() - at
            ),
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * PIXELS_PER_RECORD);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(data_err(
                path,
                i * RECORD_LEN,
                format!("label {label} is not in 0..10"),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Inverse of [`parse_records`] for one image with values on the `k/255` grid.
pub fn encode_record(image: &[f32], label: usize) -> Result<Vec<u8>> {
    if image.len() != PIXELS_PER_RECORD || label >= CIFAR_CLASSES {
        return Err(Error::invalid(
            "record needs 3072 pixels and a label in 0..10",
        ));
    }
    let mut out = Vec::with_capacity(RECORD_LEN);
    out.push(label as u8);
    out.extend(
        image
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

fn load_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| data_err(&path, 0, format!("cannot read: {e}")))?;
        let (p, l) = parse_records(&bytes, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(data_err(
            &dir.join(files[0]),
            0,
            "split contains no records",
        ));
    }
    let images = Tensor4::from_vec(
        [labels.len(), CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
        pixels,
    )?;
    Dataset::new(images, labels, split)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_files(dir, &TRAIN_FILES, Split::Train)?;
    let val = load_files(dir, &[TEST_FILE], Split::Val)?;
    Ok((train, val))
}

/// Writes `train` across the five training files and `val` to the test file.
pub fn write_cifar10(
    dir: impl AsRef<Path>,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let encode = |ds: &Dataset, range: std::ops::Range<usize>| -> Result<Vec<u8>> {
        let mut buf = Vec::with_capacity(range.len() * RECORD_LEN);
        for i in range {
            buf.extend(encode_record(ds.image(i), ds.labels[i])?);
        }
        Ok(buf)
    };
    let mut written = Vec::new();
    let per = train.len().div_ceil(TRAIN_FILES.len());
    for (f, name) in TRAIN_FILES.iter().enumerate() {
        let range = (f * per).min(train.len())..((f + 1) * per).min(train.len());
        let path = dir.join(name);
        fs::write(&path, encode(train, range)?)?;
        written.push(path);
    }
    let path = dir.join(TEST_FILE);
    fs::write(&path, encode(val, 0..val.len())?)?;
    written.push(path);
    Ok(written)
}

/// Learnable stand-in for CIFAR-10: each class has a smooth colour template,
/// samples add a random shift, brightness jitter and pixel noise. Values are
/// quantised to the `k/255` grid so they survive a write/load round trip.
pub fn synthetic_cifar(n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = Rng::new(seed);
    let coarse = 4;
    let mut templates = Vec::with_capacity(CIFAR_CLASSES);
    for _ in 0..CIFAR_CLASSES {
        let small: Vec<f32> = (0..CIFAR_CHANNELS * coarse * coarse)
            .map(|_| rng.unit() as f32)
            .collect();
        let small = Tensor4::from_vec([1, CIFAR_CHANNELS, coarse, coarse], small)?;
        templates.push(bilinear_resize(&small, CIFAR_SIDE, CIFAR_SIDE)?.into_vec());
    }
    let make = |n: usize, split: Split, rng: &mut Rng| -> Result<Dataset> {
        let mut pixels = Vec::with_capacity(n * PIXELS_PER_RECORD);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % CIFAR_CLASSES;
            let t = &templates[label];
            let dy = rng.uniform_choice(5)? as isize - 2;
            let dx = rng.uniform_choice(5)? as isize - 2;
            let gain = 0.8 + 0.4 * rng.unit();
            for c in 0..CIFAR_CHANNELS {
                for y in 0..CIFAR_SIDE as isize {
                    for x in 0..CIFAR_SIDE as isize {
                        let sy = (y + dy).clamp(0, CIFAR_SIDE as isize - 1) as usize;
                        let sx = (x + dx).clamp(0, CIFAR_SIDE as isize - 1) as usize;
                        let v = t[(c * CIFAR_SIDE + sy) * CIFAR_SIDE + sx] as f64 * gain
                            + 0.12 * rng.normal();
                        pixels.push(((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
                    }
                }
            }
            labels.push(label);
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let images = Tensor4::from_vec([n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
        let ds = Dataset::new(images, labels, split)?;
        let (images, labels) = ds.gather(&order)?;
        Dataset::new(images, labels, split)
    };
    if n_train == 0 || n_val == 0 {
        return Err(Error::EmptyData);
    }
    let train = make(n_train, Split::Train, &mut rng)?;
    let val = make(n_val, Split::Val, &mut rng)?;
    Ok((train, val))
}

/// Per-channel affine normalisation `x' = (x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn new(mean: Vec<f32>, std: Vec<f32>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::invalid(
                "normalisation needs one mean and one std per channel",
            ));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("normalisation std must be positive"));
        }
        Ok(Normalization { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population mean and standard deviation per channel of `ds`.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyData);
        }
        let m = crate::layers::BatchNorm::<f32>::moments(&ds.images);
        Normalization::new(
            m.mean.iter().map(|&v| v as f32).collect(),
            m.var.iter().map(|&v| v.sqrt() as f32).collect(),
        )
    }

    fn affine(&self, x: &Tensor4, invert: bool) -> Result<Tensor4> {
        let s = x.shape();
        if s.c != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalisation for {} channels applied to {}",
                self.mean.len(),
                s.c
            )));
        }
        let mut out = x.clone();
        let plane = s.plane();
        for n in 0..s.n {
            for c in 0..s.c {
                let off = x.index(n, c, 0, 0);
                let (m, sd) = (self.mean[c], self.std[c]);
                for v in &mut out.data_mut()[off..off + plane] {
                    *v = if invert { *v * sd + m } else { (*v - m) / sd };
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        self.affine(x, false)
    }

    pub fn invert(&self, x: &Tensor4) -> Result<Tensor4> {
        self.affine(x, true)
    }
}

pub fn normalize(ds: &Dataset, norm: &Normalization) -> Result<Dataset> {
    Dataset::new(norm.apply(&ds.images)?, ds.labels.clone(), ds.split)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
    pub enabled: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            pad: 4,
            crop: CIFAR_SIDE,
            hflip_prob: 0.5,
            enabled: true,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..AugmentPolicy::default()
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.crop == 0 || self.crop > h + 2 * self.pad || self.crop > w + 2 * self.pad {
            return Err(Error::invalid(format!(
                "crop {} does not fit a {h}×{w} image padded by {}",
                self.crop, self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid("flip probability must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Mirrors one `c × h × w` image left to right.
pub fn hflip(image: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = image.to_vec();
    for row in out.chunks_exact_mut(w).take(c * h) {
        row.reverse();
    }
    out
}

/// Zero-pads one image by `policy.pad`, takes a random `crop × crop` window and
/// flips it with probability `policy.hflip_prob`.
pub fn augment(
    image: &[f32],
    c: usize,
    h: usize,
    w: usize,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    if image.len() != c * h * w {
        return Err(Error::invalid("image length does not match its dimensions"));
    }
    if !policy.enabled {
        return Ok(image.to_vec());
    }
    policy.validate(h, w)?;
    let k = policy.crop;
    let oy = rng.uniform_choice(h + 2 * policy.pad - k + 1)?;
    let ox = rng.uniform_choice(w + 2 * policy.pad - k + 1)?;
    let mut out = vec![0.0; c * k * k];
    for ch in 0..c {
        for y in 0..k {
            let sy = (oy + y) as isize - policy.pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..k {
                let sx = (ox + x) as isize - policy.pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * k + y) * k + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    if rng.bernoulli(policy.hflip_prob) {
        out = hflip(&out, c, k, k);
    }
    Ok(out)
}

/// Source coordinates and weights for one output axis, half-pixel centres,
/// negative coordinates clamped to zero.
fn bilinear_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with the half-pixel (`align_corners = false`) convention.
pub fn bilinear_resize(x: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1×1"));
    }
    let s = x.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = bilinear_axis(s.h, out_h);
    let cols = bilinear_axis(s.w, out_w);
    let mut out = Tensor4::zeros(s.with_hw(out_h, out_w));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &x.data()[x.index(n, c, 0, 0)..][..s.plane()];
            let base = out.index(n, c, 0, 0);
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let p = |y: usize, xx: usize| src[y * s.w + xx] as f64;
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out.data_mut()[base + oy * out_w + ox] =
                        (top * (1.0 - fy) + bottom * fy) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Central `size × size` window; the offset rounds down when the margin is odd.
pub fn center_crop(x: &Tensor4, size: usize) -> Result<Tensor4> {
    let s = x.shape();
    if size == 0 || size > s.h || size > s.w {
        return Err(Error::invalid(format!(
            "cannot crop {size}×{size} from {}×{}",
            s.h, s.w
        )));
    }
    let (oy, ox) = ((s.h - size) / 2, (s.w - size) / 2);
    let mut out = Tensor4::zeros(s.with_hw(size, size));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..size {
                let src = x.index(n, c, oy + y, ox);
                let dst = out.index(n, c, y, 0);
                out.data_mut()[dst..dst + size].copy_from_slice(&x.data()[src..src + size]);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// One epoch over a dataset in fixed-size batches; the last batch may be short.
pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<(AugmentPolicy, Rng)>,
}

/// Upper bound on calibration batches when the caller does not choose.
pub const DEFAULT_CALIBRATION_BATCHES: usize = 100;

/// The first `k` full batches of a seeded shuffle of `ds`, without
/// augmentation; `k` is capped at one epoch of full batches (at least one batch).
pub fn calibration_batches(
    ds: &Dataset,
    batch_size: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Tensor4>> {
    if k == 0 {
        return Err(Error::invalid("calibration needs at least one batch"));
    }
    let per_epoch = (ds.len() / batch_size.max(1)).max(1);
    batch_iter(ds, batch_size, Some(seed))?
        .take(k.min(per_epoch))
        .map(|b| b.map(|b| b.images))
        .collect()
}

/// Batches in dataset order, or shuffled by `shuffle_seed`.
pub fn batch_iter(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if let Some(seed) = shuffle_seed {
        Rng::new(seed).shuffle(&mut order);
    }
    Ok(BatchIter {
        ds,
        order,
        pos: 0,
        batch_size,
        augment: None,
    })
}

impl<'a> BatchIter<'a> {
    pub fn with_augment(mut self, policy: AugmentPolicy, rng: Rng) -> Result<Self> {
        let (_, h, w) = self.ds.image_dims();
        if policy.enabled {
            policy.validate(h, w)?;
        }
        self.augment = Some((policy, rng));
        Ok(self)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn build(&mut self, idx: Vec<usize>) -> Result<Batch> {
        let (c, h, w) = self.ds.image_dims();
        let (images, labels) = match &mut self.augment {
            Some((policy, rng)) if policy.enabled => {
                let k = policy.crop;
                let mut data = Vec::with_capacity(idx.len() * c * k * k);
                for &i in &idx {
                    data.extend(augment(self.ds.image(i), c, h, w, policy, rng)?);
                }
                let labels = idx.iter().map(|&i| self.ds.labels[i]).collect();
                (Tensor4::from_vec([idx.len(), c, k, k], data)?, labels)
            }
            _ => self.ds.gather(&idx)?,
        };
        Ok(Batch {
            images,
            labels,
            indices: idx,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.build(idx))
    }
}
