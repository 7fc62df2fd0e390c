//! Dataset provisioning: a seeded synthetic generator and the CIFAR-100
//! binary format.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{substream, Rng};

pub const CIFAR_RECORD: usize = 3074;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 100;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn expected_records(self) -> usize {
        match self {
            Split::Train => 50_000,
            Split::Test => 10_000,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.bin",
            Split::Test => "test.bin",
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `C×H×W` images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
    coarse: Option<Vec<u8>>,
    pub class_names: Option<Vec<String>>,
    normalized: Option<ChannelStats>,
}

impl LabeledImageSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
        }
        if let Some(first) = images.first() {
            if first.shape().len() != 3 || images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::Data("images must share one C×H×W shape".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            coarse: None,
            class_names: None,
            normalized: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn coarse_labels(&self) -> Option<&[u8]> {
        self.coarse.as_deref()
    }

    pub fn normalization(&self) -> Option<&ChannelStats> {
        self.normalized.as_ref()
    }

    /// Distinct labels in ascending order.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    /// Mean and population standard deviation of each channel.
    pub fn channel_stats(&self) -> Result<ChannelStats> {
        let first = self.images.first().ok_or_else(|| Error::Data("empty set".into()))?;
        let c = first.shape()[0];
        let plane = first.len() / c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for im in &self.images {
            for ch in 0..c {
                for &v in &im.values()[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.images.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    /// Standardizes every channel with `stats`. Applying it twice is an error.
    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        if self.normalized.is_some() {
            return Err(Error::Data("set is already normalized".into()));
        }
        if let Some(first) = self.images.first() {
            let c = first.shape()[0];
            if stats.mean.len() != c || stats.std.len() != c {
                return Err(Error::Data(format!("stats cover {} channels, images have {c}", stats.mean.len())));
            }
            let plane = first.len() / c;
            for im in &mut self.images {
                for (i, v) in im.values_mut().iter_mut().enumerate() {
                    let ch = i / plane;
                    *v = (*v - stats.mean[ch]) / stats.std[ch];
                }
            }
        }
        self.normalized = Some(stats.clone());
        Ok(())
    }
}

/// Keeps samples of `class_ids`; with `relabel`, id `class_ids[k]` becomes `k`.
pub fn subset_classes(set: &LabeledImageSet, class_ids: &[usize], relabel: bool) -> Result<LabeledImageSet> {
    let present = set.present_classes();
    let mut map = vec![None; set.num_classes];
    for (k, &c) in class_ids.iter().enumerate() {
        if c >= set.num_classes || present.binary_search(&c).is_err() {
            return Err(Error::Data(format!("class {c} is not present in the set")));
        }
        if map[c].is_some() {
            return Err(Error::Data(format!("class {c} listed twice")));
        }
        map[c] = Some(k);
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut coarse = set.coarse.as_ref().map(|_| Vec::new());
    for (i, &l) in set.labels.iter().enumerate() {
        if let Some(k) = map[l] {
            images.push(set.images[i].clone());
            labels.push(if relabel { k } else { l });
            if let (Some(dst), Some(src)) = (coarse.as_mut(), set.coarse.as_ref()) {
                dst.push(src[i]);
            }
        }
    }
    let num_classes = if relabel { class_ids.len() } else { set.num_classes };
    let class_names = set.class_names.as_ref().map(|names| {
        if relabel {
            class_ids.iter().map(|&c| names[c].clone()).collect()
        } else {
            names.clone()
        }
    });
    Ok(LabeledImageSet {
        images,
        labels,
        num_classes,
        coarse,
        class_names,
        normalized: set.normalized.clone(),
    })
}

/// Synthetic generator knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub channels: usize,
    pub noise: f64,
    pub max_shift: usize,
    /// Side of the random grid each template is upsampled from.
    pub coarse: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            channels: 3,
            noise: 0.15,
            max_shift: 2,
            coarse: 4,
        }
    }
}

/// One smooth template per class: a random coarse grid, bilinearly upsampled.
pub fn synth_templates(num_classes: usize, image_size: usize, opts: &SynthOptions, seed: u64) -> Result<Vec<Tensor>> {
    if num_classes == 0 || image_size == 0 || opts.channels == 0 || opts.coarse < 2 {
        return Err(Error::Config("synthetic generator needs positive sizes and coarse >= 2".into()));
    }
    let mut rng = substream(seed, "synth.templates");
    let g = opts.coarse;
    let s = image_size;
    (0..num_classes)
        .map(|_| {
            let mut px = Vec::with_capacity(opts.channels * s * s);
            for _ in 0..opts.channels {
                let grid: Vec<f64> = (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect();
                for y in 0..s {
                    let fy = if s > 1 { y as f64 * (g - 1) as f64 / (s - 1) as f64 } else { 0.0 };
                    let (y0, ty) = ((fy.floor() as usize).min(g - 2), fy - (fy.floor()).min((g - 2) as f64));
                    for x in 0..s {
                        let fx = if s > 1 { x as f64 * (g - 1) as f64 / (s - 1) as f64 } else { 0.0 };
                        let (x0, tx) = ((fx.floor() as usize).min(g - 2), fx - (fx.floor()).min((g - 2) as f64));
                        let at = |yy: usize, xx: usize| grid[yy * g + xx];
                        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                        let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                        px.push(top * (1.0 - ty) + bot * ty);
                    }
                }
            }
            Tensor::new(vec![opts.channels, s, s], px)
        })
        .collect()
}

/// Template shifted by `(dx, dy)` with edge replication, plus clamped noise.
fn sample_from(template: &Tensor, opts: &SynthOptions, rng: &mut Rng, noise: &Normal<f64>) -> Tensor {
    let (c, s) = (template.shape()[0], template.shape()[1]);
    let span = opts.max_shift as i64;
    let dx = rng.gen_range(-span..=span);
    let dy = rng.gen_range(-span..=span);
    let src = template.values();
    let mut px = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..s as i64 {
            let sy = (y - dy).clamp(0, s as i64 - 1) as usize;
            for x in 0..s as i64 {
                let sx = (x - dx).clamp(0, s as i64 - 1) as usize;
                let v = src[ch * s * s + sy * s + sx];
                let n = if opts.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                px.push((v + n).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(template.shape().to_vec(), px).expect("template shape")
}

/// `per_class` noisy, shifted samples of each template, class-major order.
pub fn synth_samples(templates: &[Tensor], per_class: usize, opts: &SynthOptions, rng: &mut Rng) -> Result<LabeledImageSet> {
    if !(opts.noise >= 0.0) {
        return Err(Error::Config(format!("noise {} must be >= 0", opts.noise)));
    }
    let noise = Normal::new(0.0, opts.noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut images = Vec::with_capacity(templates.len() * per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for (class, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            images.push(sample_from(t, opts, rng, &noise));
            labels.push(class);
        }
    }
    LabeledImageSet::new(images, labels, templates.len())
}

/// Default-option synthetic set, fully determined by `seed`.
pub fn synth_generate(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<LabeledImageSet> {
    let opts = SynthOptions::default();
    let templates = synth_templates(num_classes, image_size, &opts, seed)?;
    synth_samples(&templates, per_class, &opts, &mut substream(seed, "synth.samples"))
}

/// Train and test sets drawn from the same templates with independent noise.
pub fn synth_split(
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    image_size: usize,
    opts: &SynthOptions,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let templates = synth_templates(num_classes, image_size, opts, seed)?;
    let train = synth_samples(&templates, train_per_class, opts, &mut substream(seed, "synth.train"))?;
    let test = synth_samples(&templates, test_per_class, opts, &mut substream(seed, "synth.test"))?;
    Ok((train, test))
}

/// Parses CIFAR-100 records. `expected` enforces an exact record count.
pub fn parse_cifar100(bytes: &[u8], expected: Option<usize>) -> Result<LabeledImageSet> {
    let whole = bytes.len() / CIFAR_RECORD;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: (whole * CIFAR_RECORD) as u64,
            detail: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD} bytes",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    if let Some(n) = expected {
        if whole != n {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                detail: format!("expected {n} records, found {whole}"),
            });
        }
    }
    let mut images = Vec::with_capacity(whole);
    let mut labels = Vec::with_capacity(whole);
    let mut coarse = Vec::with_capacity(whole);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CIFAR_CLASSES || rec[0] >= 20 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                detail: format!("label out of range (coarse {}, fine {fine})", rec[0]),
            });
        }
        coarse.push(rec[0]);
        labels.push(fine);
        let px = rec[2..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Tensor::new(vec![3, CIFAR_SIDE, CIFAR_SIDE], px)?);
    }
    let mut set = LabeledImageSet::new(images, labels, CIFAR_CLASSES)?;
    set.coarse = Some(coarse);
    Ok(set)
}

/// Loads `train.bin` / `test.bin` from `path` (a directory or the file itself).
pub fn cifar100_load(path: &Path, split: Split) -> Result<LabeledImageSet> {
    let file = if path.is_dir() { path.join(split.file_name()) } else { path.to_path_buf() };
    let bytes = std::fs::read(&file).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
    parse_cifar100(&bytes, Some(split.expected_records()))
}

/// Serializes a `3×32×32` set back to CIFAR-100 records.
///
/// Pixels are rounded to the nearest byte; coarse labels default to 0 when
/// the set carries none.
pub fn to_cifar100_bytes(set: &LabeledImageSet) -> Result<Vec<u8>> {
    if set.normalized.is_some() {
        return Err(Error::Data("cannot serialize a normalized set".into()));
    }
    if set.num_classes > CIFAR_CLASSES {
        return Err(Error::Data(format!("{} classes exceed the format's 100", set.num_classes)));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for (i, im) in set.images.iter().enumerate() {
        if im.len() != CIFAR_PIXELS {
            return Err(Error::Data(format!("image shape {:?} is not 3×32×32", im.shape())));
        }
        out.push(set.coarse.as_ref().map_or(0, |c| c[i]));
        out.push(set.labels[i] as u8);
        out.extend(im.values().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(coarse: u8, fine: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend((0..CIFAR_PIXELS).map(|i| fill.wrapping_add(i as u8)));
        r
    }

    #[test]
    fn parse_and_round_trip() {
        let bytes = [record(3, 42, 0), record(19, 99, 7), record(0, 0, 200)].concat();
        let set = parse_cifar100(&bytes, Some(3)).unwrap();
        assert_eq!(set.labels(), &[42, 99, 0]);
        assert_eq!(set.image(0).shape(), &[3, 32, 32]);
        assert_eq!(set.image(1).values()[0], 7.0 / 255.0);
        assert_eq!(to_cifar100_bytes(&set).unwrap(), bytes);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let mut bytes = [record(1, 2, 0), record(1, 2, 0)].concat();
        bytes.truncate(CIFAR_RECORD + 100);
        match parse_cifar100(&bytes, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let bytes = [record(1, 2, 0), record(1, 100, 0)].concat();
        match parse_cifar100(&bytes, None) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        let bytes = record(1, 2, 0);
        assert!(matches!(
            parse_cifar100(&bytes, Some(Split::Test.expected_records())),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_generate(3, 4, 8, 11).unwrap();
        let b = synth_generate(3, 4, 8, 11).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(3, 4, 8, 12).unwrap();
        assert_ne!(a, c);
        assert!(a.images().iter().all(|im| im.values().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn noiseless_unshifted_samples_equal_template() {
        let opts = SynthOptions {
            noise: 0.0,
            max_shift: 0,
            ..SynthOptions::default()
        };
        let t = synth_templates(2, 8, &opts, 5).unwrap();
        let set = synth_samples(&t, 3, &opts, &mut substream(5, "x")).unwrap();
        for (im, &l) in set.images().iter().zip(set.labels()) {
            assert_eq!(im, &t[l]);
        }
    }

    #[test]
    fn subset_and_relabel() {
        let set = synth_generate(10, 2, 4, 0).unwrap();
        let same = subset_classes(&set, &(0..10).collect::<Vec<_>>(), false).unwrap();
        assert_eq!(same, set);
        let sub = subset_classes(&set, &[7, 3], true).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.labels(), &[1, 1, 0, 0]);
        assert_eq!(sub.image(2), set.image(14));
        assert!(subset_classes(&set, &[10], false).is_err());
    }

    #[test]
    fn normalization_applies_once() {
        let mut set = synth_generate(2, 5, 4, 3).unwrap();
        let stats = set.channel_stats().unwrap();
        set.normalize(&stats).unwrap();
        let after = set.channel_stats().unwrap();
        assert!(after.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(after.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
        assert!(set.normalize(&stats).is_err());
    }
}
