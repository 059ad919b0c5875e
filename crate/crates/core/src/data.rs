//! Unpaired two-domain image supply.
//!
//! Images are `3×H×W` tensors with values in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use qsattn_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QsError, Result};

pub const TRAIN_A: &str = "trainA";
pub const TRAIN_B: &str = "trainB";
pub const TEST_A: &str = "testA";
pub const TEST_B: &str = "testB";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    pub image: Tensor<f32>,
    pub domain: DomainTag,
    /// Object pixels, row-major; synthetic data only.
    pub mask: Option<Vec<bool>>,
}

impl DomainSample {
    pub fn side(&self) -> usize {
        self.image.shape()[1]
    }

    /// Fraction of pixels inside the object mask.
    pub fn mask_coverage(&self) -> Option<f64> {
        self.mask
            .as_ref()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
    }
}

/// The two object colors of a synthetic domain, RGB in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub colors: [[f32; 3]; 2],
}

impl Palette {
    pub fn mean(&self) -> [f32; 3] {
        std::array::from_fn(|c| 0.5 * (self.colors[0][c] + self.colors[1][c]))
    }
}

/// Colors of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaletteSpec {
    pub x: Palette,
    pub y: Palette,
    pub background: [f32; 3],
}

/// Brown blotchy objects in X, blue-and-white striped objects in Y, on a shared green field.
pub const SYNTH_PALETTES: PaletteSpec = PaletteSpec {
    x: Palette {
        colors: [[0.85, 0.55, 0.2], [0.45, 0.25, 0.08]],
    },
    y: Palette {
        colors: [[0.15, 0.25, 0.85], [0.92, 0.92, 0.96]],
    },
    background: [0.35, 0.6, 0.3],
};

const BACKGROUND_NOISE: f32 = 0.02;
const OBJECT_NOISE: f32 = 0.04;
const MIN_COVERAGE: f64 = 0.25;
const MAX_COVERAGE: f64 = 0.45;

/// Two independently drawn synthetic domains.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub x: Vec<DomainSample>,
    pub y: Vec<DomainSample>,
}

fn check_size(size: usize) -> Result<()> {
    if size < 8 || !size.is_multiple_of(4) {
        return Err(QsError::config(format!("image size {size} must be a multiple of 4 and at least 8")));
    }
    Ok(())
}

/// `n` textured-ellipse images per domain.
pub fn synth_pair(seed: u64, n: usize, size: usize) -> Result<SynthPair> {
    check_size(size)?;
    let mut rx = ChaCha8Rng::seed_from_u64(seed);
    rx.set_stream(1);
    let mut ry = ChaCha8Rng::seed_from_u64(seed);
    ry.set_stream(2);
    Ok(SynthPair {
        x: (0..n).map(|_| synth_sample(DomainTag::X, size, &mut rx)).collect(),
        y: (0..n).map(|_| synth_sample(DomainTag::Y, size, &mut ry)).collect(),
    })
}

struct Ellipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    cos: f32,
    sin: f32,
}

impl Ellipse {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let target = rng.random_range(MIN_COVERAGE..MAX_COVERAGE) as f32;
        let a = rng.random_range(0.3f32..0.45);
        let b = (target / (std::f32::consts::PI * a)).min(0.45);
        let theta = rng.random_range(0.0..std::f32::consts::PI);
        Ellipse {
            cx: rng.random_range(0.4..0.6),
            cy: rng.random_range(0.4..0.6),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, u: f32, v: f32) -> bool {
        let (du, dv) = (u - self.cx, v - self.cy);
        let p = du * self.cos + dv * self.sin;
        let q = -du * self.sin + dv * self.cos;
        (p / self.a).powi(2) + (q / self.b).powi(2) <= 1.0
    }
}

/// Object texture in `[0, 1]` at normalized coordinates.
enum Texture {
    Blotches([(f32, f32, f32); 3]),
    Stripes { fu: f32, fv: f32, phase: f32 },
}

impl Texture {
    fn random<R: Rng + ?Sized>(domain: DomainTag, rng: &mut R) -> Self {
        match domain {
            DomainTag::X => Texture::Blotches(std::array::from_fn(|_| {
                let angle = rng.random_range(0.0..std::f32::consts::TAU);
                let freq = rng.random_range(10.0f32..16.0);
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..std::f32::consts::TAU))
            })),
            DomainTag::Y => {
                let angle = rng.random_range(0.0..std::f32::consts::PI);
                let freq = rng.random_range(40.0f32..52.0);
                Texture::Stripes {
                    fu: freq * angle.cos(),
                    fv: freq * angle.sin(),
                    phase: rng.random_range(0.0..std::f32::consts::TAU),
                }
            }
        }
    }

    fn at(&self, u: f32, v: f32) -> f32 {
        match self {
            Texture::Blotches(waves) => {
                let s: f32 = waves.iter().map(|&(fu, fv, p)| (fu * u + fv * v + p).sin()).sum();
                if s > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Texture::Stripes { fu, fv, phase } => {
                if (fu * u + fv * v + phase).sin() > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn synth_sample<R: Rng + ?Sized>(domain: DomainTag, size: usize, rng: &mut R) -> DomainSample {
    let palette = match domain {
        DomainTag::X => SYNTH_PALETTES.x,
        DomainTag::Y => SYNTH_PALETTES.y,
    };
    loop {
        let shape = Ellipse::random(rng);
        let texture = Texture::random(domain, rng);
        let plane = size * size;
        let mut data = vec![0f32; 3 * plane];
        let mut mask = vec![false; plane];
        for r in 0..size {
            for c in 0..size {
                let (u, v) = ((c as f32 + 0.5) / size as f32, (r as f32 + 0.5) / size as f32);
                let inside = shape.contains(u, v);
                let (color, noise) = if inside {
                    let t = texture.at(u, v);
                    let mix = std::array::from_fn::<f32, 3, _>(|k| {
                        palette.colors[0][k] * (1.0 - t) + palette.colors[1][k] * t
                    });
                    (mix, OBJECT_NOISE)
                } else {
                    (SYNTH_PALETTES.background, BACKGROUND_NOISE)
                };
                let p = r * size + c;
                mask[p] = inside;
                for k in 0..3 {
                    let value = color[k] + noise * rng.random_range(-1.0f32..1.0);
                    data[k * plane + p] = (value.clamp(0.0, 1.0)) * 2.0 - 1.0;
                }
            }
        }
        let coverage = mask.iter().filter(|&&b| b).count() as f64 / plane as f64;
        if (0.2..=0.5).contains(&coverage) {
            return DomainSample {
                image: Tensor::new(vec![3, size, size], data).expect("sized buffer"),
                domain,
                mask: Some(mask),
            };
        }
    }
}

/// Converts an RGB image to a `3×H×W` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * plane + p] = px[k] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized buffer")
}

/// Converts a `3×H×W` tensor in `[-1, 1]` to an RGB image, clamping out-of-range values.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = t.dims3("tensor_to_rgb")?;
    if c != 3 {
        return Err(QsError::config(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb(std::array::from_fn(|k| {
            ((t.data()[k * plane + p].clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        }))
    }))
}

pub fn save_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    tensor_to_rgb(t)?.save(path).map_err(|source| QsError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Random-crop and flip settings used for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preprocess {
    /// Resize the shorter side to `size`, then center-crop.
    Center,
    /// Resize the shorter side to `size + size/8`, random-crop, flip with probability ½.
    Augment,
}

/// Decodes and preprocesses one image.
pub fn load_image<R: Rng + ?Sized>(path: &Path, size: usize, mode: Preprocess, rng: &mut R) -> Result<Tensor<f32>> {
    check_size(size)?;
    let img = image::open(path)
        .map_err(|source| QsError::Image {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    Ok(rgb_to_tensor(&preprocess(&img, size, mode, rng)))
}

/// Resize-and-crop to `size×size`.
pub fn preprocess<R: Rng + ?Sized>(img: &RgbImage, size: usize, mode: Preprocess, rng: &mut R) -> RgbImage {
    let load = match mode {
        Preprocess::Center => size,
        Preprocess::Augment => size + size / 8,
    } as u32;
    let (w, h) = img.dimensions();
    let (nw, nh) = if w <= h {
        (load, ((h as u64 * load as u64) as f64 / w as f64).round().max(load as f64) as u32)
    } else {
        (((w as u64 * load as u64) as f64 / h as f64).round().max(load as f64) as u32, load)
    };
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let s = size as u32;
    let (x0, y0) = match mode {
        Preprocess::Center => ((nw - s) / 2, (nh - s) / 2),
        Preprocess::Augment => (rng.random_range(0..=nw - s), rng.random_range(0..=nh - s)),
    };
    let mut out = imageops::crop_imm(&resized, x0, y0, s, s).to_image();
    if mode == Preprocess::Augment && rng.random_bool(0.5) {
        imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Decodable image files of a directory, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every decodable image of `dir`; unreadable files are skipped with a warning.
pub fn load_folder<R: Rng + ?Sized>(dir: &Path, size: usize, mode: Preprocess, rng: &mut R) -> Result<Vec<(PathBuf, Tensor<f32>)>> {
    let mut out = Vec::new();
    for path in image_files(dir)? {
        match load_image(&path, size, mode, rng) {
            Ok(t) => out.push((path, t)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if out.is_empty() {
        return Err(QsError::config(format!("no readable images in {}", dir.display())));
    }
    Ok(out)
}

/// Writes a synthetic dataset in the `trainA/trainB/testA/testB` layout.
pub fn write_synth_dataset(root: &Path, seed: u64, n_train: usize, n_test: usize, size: usize) -> Result<()> {
    let train = synth_pair(seed, n_train, size)?;
    let test = synth_pair(seed.wrapping_add(1), n_test, size)?;
    for (dir, samples) in [(TRAIN_A, &train.x), (TRAIN_B, &train.y), (TEST_A, &test.x), (TEST_B, &test.y)] {
        let d = root.join(dir);
        fs::create_dir_all(&d)?;
        for (i, s) in samples.iter().enumerate() {
            save_png(&s.image, &d.join(format!("{i:04}.png")))?;
        }
    }
    Ok(())
}

/// Unpaired training images of both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedData {
    pub x: Vec<Tensor<f32>>,
    pub y: Vec<Tensor<f32>>,
}

impl UnpairedData {
    pub fn new(x: Vec<Tensor<f32>>, y: Vec<Tensor<f32>>) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(QsError::config("both domains need at least one image"));
        }
        let shape = x[0].shape().to_vec();
        if let Some(bad) = x.iter().chain(&y).find(|t| t.shape() != shape.as_slice()) {
            return Err(QsError::config(format!("image shapes differ: {:?} vs {:?}", shape, bad.shape())));
        }
        Ok(UnpairedData { x, y })
    }

    pub fn from_synth(pair: &SynthPair) -> Result<Self> {
        Self::new(
            pair.x.iter().map(|s| s.image.clone()).collect(),
            pair.y.iter().map(|s| s.image.clone()).collect(),
        )
    }

    /// Center-cropped `trainA`/`trainB` images of a dataset root.
    pub fn from_root(root: &Path, size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = load_folder(&root.join(TRAIN_A), size, Preprocess::Center, &mut rng)?;
        let y = load_folder(&root.join(TRAIN_B), size, Preprocess::Center, &mut rng)?;
        Self::new(x.into_iter().map(|p| p.1).collect(), y.into_iter().map(|p| p.1).collect())
    }

    pub fn side(&self) -> usize {
        self.x[0].shape()[1]
    }

    /// Steps per epoch: one pass over domain X.
    pub fn epoch_len(&self) -> usize {
        self.x.len()
    }

    /// Source order of one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.x.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// A target image drawn independently of the source order.
    pub fn pick_y<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.y.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variance(values: &[f32]) -> f64 {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn synthetic_data_is_reproducible() {
        assert_eq!(synth_pair(4, 3, 32).unwrap(), synth_pair(4, 3, 32).unwrap());
        assert_ne!(synth_pair(4, 3, 32).unwrap(), synth_pair(5, 3, 32).unwrap());
    }

    #[test]
    fn masks_cover_a_bounded_fraction() {
        let pair = synth_pair(0, 20, 64).unwrap();
        for s in pair.x.iter().chain(&pair.y) {
            let c = s.mask_coverage().unwrap();
            assert!((0.1..=0.6).contains(&c), "{c}");
        }
    }

    #[test]
    fn object_is_more_varied_than_background() {
        let pair = synth_pair(1, 20, 64).unwrap();
        for s in pair.x.iter().chain(&pair.y) {
            let mask = s.mask.as_ref().unwrap();
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for k in 0..3 {
                for (p, &m) in mask.iter().enumerate() {
                    let v = s.image.data()[k * mask.len() + p];
                    if m {
                        inside.push(v)
                    } else {
                        outside.push(v)
                    }
                }
            }
            assert!(variance(&inside) > variance(&outside));
        }
    }

    #[test]
    fn values_stay_in_range() {
        let pair = synth_pair(2, 4, 32).unwrap();
        assert!(pair
            .x
            .iter()
            .chain(&pair.y)
            .all(|s| s.image.shape() == [3, 32, 32] && s.image.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(synth_pair(0, 1, 30).is_err());
    }

    #[test]
    fn center_preprocess_resizes_and_crops() {
        let img = RgbImage::from_pixel(512, 512, Rgb([255, 255, 255]));
        let out = preprocess(&img, 256, Preprocess::Center, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.dimensions(), (256, 256));
        let t = rgb_to_tensor(&out);
        assert!(t.data().iter().all(|&v| v == 1.0));
        let wide = RgbImage::from_pixel(80, 40, Rgb([0, 0, 0]));
        assert_eq!(preprocess(&wide, 32, Preprocess::Center, &mut ChaCha8Rng::seed_from_u64(0)).dimensions(), (32, 32));
    }

    #[test]
    fn flips_are_seeded() {
        let img = RgbImage::from_fn(40, 40, |x, _| Rgb([x as u8 * 6, 0, 0]));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8)
                .map(|_| preprocess(&img, 32, Preprocess::Augment, &mut rng).into_raw())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let s = &synth_pair(0, 1, 16).unwrap().x[0];
        let path = dir.path().join("a.png");
        save_png(&s.image, &path).unwrap();
        let back = load_image(&path, 16, Preprocess::Center, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(back.max_abs_diff(&s.image) <= 1.0 / 127.5 + 1e-6);
    }

    #[test]
    fn empty_folder_is_an_error_and_bad_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(load_folder(dir.path(), 16, Preprocess::Center, &mut rng).is_err());
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        save_png(&Tensor::zeros(vec![3, 16, 16]), &dir.path().join("ok.png")).unwrap();
        let loaded = load_folder(dir.path(), 16, Preprocess::Center, &mut rng).unwrap();
        assert_eq!(loaded.len(), 1);
    }
}
