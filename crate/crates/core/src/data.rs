//! Images, the synthetic fine-grained dataset, the directory dataset format,
//! resizing/augmentation and tensor conversion.

use std::collections::BTreeMap;
use std::path::Path;

use fpt_numerics::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FptError, Result};

/// 8-bit RGB image stored channel-major (`[3, H, W]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(FptError::Data(format!(
                "image buffer has {} bytes, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut out = Image::filled(height, width, 0);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, 0);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c]);
            }
        }
        out
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| self.get(c, y as usize, x as usize)))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
}

/// Half-pixel-center source coordinate for output index `dst`: the two
/// neighbours and the weight of the upper one.
fn source_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centers; results are rounded and clamped
/// to `0..=255`.
pub fn resize_to(img: &Image, height: usize, width: usize) -> Image {
    assert!(height >= 1 && width >= 1, "resize target must be positive");
    if height == img.height && width == img.width {
        return img.clone();
    }
    let rows: Vec<_> = (0..height).map(|y| source_taps(y, img.height, height)).collect();
    let cols: Vec<_> = (0..width).map(|x| source_taps(x, img.width, width)).collect();
    let mut out = Image::filled(height, width, 0);
    for c in 0..Image::CHANNELS {
        for (y, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
                let p = |yy, xx| img.get(c, yy, xx) as f64;
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bot = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                out.set(c, y, x, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Square bilinear resize.
pub fn resize_bilinear(img: &Image, target: usize) -> Image {
    resize_to(img, target, target)
}

/// One draw of the side-input augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    /// Crop area as a fraction of the image area.
    pub scale: f64,
    /// Crop offset as fractions of the free margin, each in `[0, 1]`.
    pub offset: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        scale: 1.0,
        offset: (0.0, 0.0),
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip: rng.gen_bool(0.5),
            scale: rng.gen_range(0.8..=1.0),
            offset: (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
        }
    }

    /// Square crop, resized back to the input size, then an optional flip.
    pub fn apply(&self, img: &Image) -> Image {
        let side_of = |n: usize| ((n as f64 * self.scale.sqrt()).round() as usize).clamp(1, n);
        let (ch, cw) = (side_of(img.height), side_of(img.width));
        let top = ((img.height - ch) as f64 * self.offset.0).round() as usize;
        let left = ((img.width - cw) as f64 * self.offset.1).round() as usize;
        let cropped = if (ch, cw) == (img.height, img.width) {
            img.clone()
        } else {
            resize_to(&img.crop(top, left, ch, cw), img.height, img.width)
        };
        if self.flip {
            cropped.flip_horizontal()
        } else {
            cropped
        }
    }
}

/// Random flip + resized crop for the side-network input only.
pub fn augment_low(img: &Image, rng: &mut impl Rng) -> Image {
    AugmentParams::sample(rng).apply(img)
}

/// Synthetic fine-grained classification task: a gray noisy canvas holding
/// one small zero-mean texture patch whose pattern is the label.
///
/// Cues sit on a `cue_size` grid and have period 2 (or 4), so a bilinear
/// downscale by `cue_size` samples only their center 2x2 and averages them
/// out. The low-resolution copy carries no label information by design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub canvas: usize,
    pub cue_size: usize,
    pub num_classes: usize,
    /// Std of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Cue amplitude in pixel units.
    pub contrast: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            canvas: 128,
            cue_size: 4,
            num_classes: 4,
            noise: 2.0,
            contrast: 60.0,
            samples: 1000,
            seed: 17,
        }
    }
}

pub const TEXTURE_NAMES: [&str; 4] = ["hstripe", "vstripe", "checker", "checker2"];

/// Sign of texture `class` at cue-local pixel `(y, x)`.
pub fn texture_sign(class: usize, y: usize, x: usize) -> f64 {
    let odd = match class {
        0 => y % 2 == 1,
        1 => x % 2 == 1,
        2 => (x + y) % 2 == 1,
        _ => (x / 2 + y / 2) % 2 == 1,
    };
    if odd {
        -1.0
    } else {
        1.0
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FptError::Config(m));
        if self.cue_size == 0 || self.cue_size > self.canvas {
            return bad(format!("cue size {} does not fit canvas {}", self.cue_size, self.canvas));
        }
        if self.cue_size % 2 != 0 || self.canvas % self.cue_size != 0 {
            return bad(format!(
                "cue size {} must be even and divide canvas {}",
                self.cue_size, self.canvas
            ));
        }
        if !(2..=TEXTURE_NAMES.len()).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside 2..={}", self.num_classes, TEXTURE_NAMES.len()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.contrast >= 0.0 && self.contrast.is_finite()) {
            return bad("noise and contrast must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = FptError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| FptError::Config(format!("unknown split {s}")))
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Samples that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// 70/10/20 partition sizes, rounding toward the training split.
fn partition(n: usize) -> [usize; 3] {
    let val = n / 10;
    let test = n / 5;
    [n - val - test, val, test]
}

fn render(spec: &SynthSpec, label: usize, rng: &mut ChaCha8Rng) -> Image {
    let n = spec.canvas;
    let cells = n / spec.cue_size;
    let (cy, cx) = (rng.gen_range(0..cells) * spec.cue_size, rng.gen_range(0..cells) * spec.cue_size);
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut img = Image::filled(n, n, 0);
    for c in 0..Image::CHANNELS {
        for y in 0..n {
            for x in 0..n {
                let mut v = 128.0 + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                if (cy..cy + spec.cue_size).contains(&y) && (cx..cx + spec.cue_size).contains(&x) {
                    v += spec.contrast * texture_sign(label, y - cy, x - cx);
                }
                img.set(c, y, x, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

/// Deterministic synthetic dataset; every split is stratified by class.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = Dataset {
        class_names: TEXTURE_NAMES[..spec.num_classes].iter().map(|s| s.to_string()).collect(),
        ..Default::default()
    };
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); spec.num_classes];
    for i in 0..spec.samples {
        let label = i % spec.num_classes;
        by_class[label].push(Sample {
            id: format!("s{i:05}"),
            image: render(spec, label, &mut rng),
            label,
        });
    }
    for group in by_class {
        let sizes = partition(group.len());
        let mut it = group.into_iter();
        for (split, size) in Split::ALL.into_iter().zip(sizes) {
            ds.split_mut(split).extend(it.by_ref().take(size));
        }
    }
    for split in Split::ALL {
        ds.split_mut(split).shuffle(&mut rng);
    }
    Ok(ds)
}

/// Listing written next to a directory dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub classes: Vec<String>,
    pub splits: BTreeMap<Split, Vec<String>>,
}

pub const MANIFEST_FILE: &str = "splits.json";

/// Writes `<root>/<split>/<class>/<id>.png` plus the split manifest.
pub fn write_dir(ds: &Dataset, root: &Path) -> Result<()> {
    let mut manifest = SplitManifest {
        classes: ds.class_names.clone(),
        ..Default::default()
    };
    for split in Split::ALL {
        let ids = manifest.splits.entry(split).or_default();
        for s in ds.split(split) {
            let dir = root.join(split.name()).join(&ds.class_names[s.label]);
            std::fs::create_dir_all(&dir).map_err(|e| FptError::io(&dir, e))?;
            let path = dir.join(format!("{}.png", s.id));
            s.image
                .to_rgb()
                .save(&path)
                .map_err(|e| FptError::Data(format!("writing {}: {e}", path.display())))?;
            ids.push(s.id.clone());
        }
    }
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| FptError::io(&path, e))
}

/// Reads a directory dataset. Class names come from the manifest when present,
/// otherwise from the sorted union of class directories. Undecodable images
/// land in [`Dataset::skipped`].
pub fn load_dir(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: Option<SplitManifest> = match std::fs::read_to_string(&manifest_path) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| FptError::format(&manifest_path, e.to_string()))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(FptError::io(&manifest_path, e)),
    };
    let list_dirs = |p: &Path| -> Result<Vec<String>> {
        let mut out = Vec::new();
        match std::fs::read_dir(p) {
            Ok(rd) => {
                for e in rd {
                    let e = e.map_err(|err| FptError::io(p, err))?;
                    if e.path().is_dir() {
                        out.push(e.file_name().to_string_lossy().into_owned());
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(FptError::io(p, e)),
        }
        out.sort();
        Ok(out)
    };
    let class_names = match &manifest {
        Some(m) => m.classes.clone(),
        None => {
            let mut all = Vec::new();
            for split in Split::ALL {
                all.extend(list_dirs(&root.join(split.name()))?);
            }
            all.sort();
            all.dedup();
            all
        }
    };
    if class_names.is_empty() {
        return Err(FptError::Data(format!("no classes found under {}", root.display())));
    }
    let mut ds = Dataset {
        class_names: class_names.clone(),
        ..Default::default()
    };
    for split in Split::ALL {
        let mut found: BTreeMap<String, (usize, std::path::PathBuf)> = BTreeMap::new();
        for (label, class) in class_names.iter().enumerate() {
            let dir = root.join(split.name()).join(class);
            let rd = match std::fs::read_dir(&dir) {
                Ok(rd) => rd,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(FptError::io(&dir, e)),
            };
            for e in rd {
                let path = e.map_err(|err| FptError::io(&dir, err))?.path();
                if path.extension().and_then(|x| x.to_str()) == Some("png") {
                    let id = path.file_stem().unwrap().to_string_lossy().into_owned();
                    found.insert(id, (label, path));
                }
            }
        }
        let order: Vec<String> = match manifest.as_ref().and_then(|m| m.splits.get(&split)) {
            Some(ids) => ids.clone(),
            None => found.keys().cloned().collect(),
        };
        for id in order {
            let Some((label, path)) = found.get(&id) else {
                ds.skipped.push((id, format!("listed in {} split but no file found", split.name())));
                continue;
            };
            match image::open(path) {
                Ok(img) => ds.split_mut(split).push(Sample {
                    id,
                    image: Image::from_rgb(&img.to_rgb8()),
                    label: *label,
                }),
                Err(e) => ds.skipped.push((id, e.to_string())),
            }
        }
    }
    Ok(ds)
}

/// Per-channel affine normalization applied when converting to floats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormStats {
    /// Fixed statistics for the frozen path, so cached features depend only
    /// on the stored image.
    pub const BACKBONE: NormStats = NormStats {
        mean: [0.5; 3],
        std: [0.5; 3],
    };

    /// Channel statistics of `samples` after resizing to `resolution`.
    pub fn fit(samples: &[Sample], resolution: usize) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0f64;
        for s in samples {
            let img = resize_bilinear(&s.image, resolution);
            let plane = resolution * resolution;
            for c in 0..3 {
                for &v in &img.data()[c * plane..(c + 1) * plane] {
                    let v = v as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane as f64;
        }
        if count == 0.0 {
            return Self::BACKBONE;
        }
        let mean = sum.map(|s| s / count);
        let std = [0, 1, 2].map(|c| (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3));
        Self {
            mean: mean.map(|m| m as f32),
            std: std.map(|s| s as f32),
        }
    }
}

/// Stacks images of equal size into a normalized `[B, 3, H, W]` tensor.
pub fn to_tensor(images: &[&Image], norm: &NormStats) -> Result<Tensor<f32>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(FptError::Data("images in a batch must share one size".into()));
        }
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(img.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| (v as f32 / 255.0 - m) / s));
        }
    }
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> Image {
        let mut img = Image::filled(h, w, 0);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img.set(c, y, x, f(y, x));
                }
            }
        }
        img
    }

    #[test]
    fn resize_examples() {
        let img = gray(5, 7, |y, x| (y * 31 + x * 7) as u8);
        assert_eq!(resize_to(&img, 5, 7), img);
        let flat = Image::filled(9, 9, 77);
        assert_eq!(resize_bilinear(&flat, 4), Image::filled(4, 4, 77));
        let block = gray(2, 2, |y, _| if y == 0 { 0 } else { 100 });
        assert_eq!(resize_bilinear(&block, 1).data(), &[50, 50, 50]);
    }

    #[test]
    fn augmentation_contracts() {
        let img = gray(16, 16, |y, x| (y * 16 + x) as u8);
        let a = augment_low(&img, &mut ChaCha8Rng::seed_from_u64(4));
        let b = augment_low(&img, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(flip.apply(&flip.apply(&img)), img);
        assert_eq!(AugmentParams::IDENTITY.apply(&img), img);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec {
            samples: 41,
            canvas: 32,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let mut hist = vec![0usize; spec.num_classes];
        for split in Split::ALL {
            for s in a.split(split) {
                hist[s.label] += 1;
            }
        }
        assert_eq!(hist.iter().sum::<usize>(), 41);
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }

    #[test]
    fn cue_must_fit_canvas() {
        let spec = SynthSpec {
            cue_size: 256,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(FptError::Config(_))));
    }

    #[test]
    fn cue_vanishes_under_downsampling() {
        let spec = SynthSpec {
            noise: 0.0,
            samples: 8,
            ..SynthSpec::default()
        };
        let ds = synth_generate(&spec).unwrap();
        for s in &ds.train {
            assert_ne!(s.image, Image::filled(128, 128, 128));
            assert_eq!(resize_bilinear(&s.image, 32), Image::filled(32, 32, 128));
        }
    }

    #[test]
    fn tensor_conversion_normalizes() {
        let img = Image::filled(2, 2, 255);
        let t = to_tensor(&[&img], &NormStats::BACKBONE).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }
}
