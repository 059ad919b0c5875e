//! Desk-scale quality signals: patch sliced Wasserstein distance and a
//! palette classifier for the synthetic domains.

use qsattn_tensor::Tensor;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::PaletteSpec;
use crate::error::{QsError, Result};

pub const DEFAULT_PATCH: usize = 7;
pub const DEFAULT_PROJECTIONS: usize = 256;
pub const MIN_BANK: usize = 1024;

/// Flattened `k×k×3` patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBank {
    dim: usize,
    data: Vec<f64>,
}

impl PatchBank {
    /// A bank from raw row-major vectors of length `dim`.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(QsError::config(format!("{} values do not form {dim}-dimensional patches", data.len())));
        }
        Ok(PatchBank { dim, data })
    }

    /// `count` patches of side `k` at random positions of random images.
    pub fn sample(images: &[Tensor<f32>], k: usize, count: usize, seed: u64) -> Result<Self> {
        if count < MIN_BANK {
            return Err(QsError::config(format!("a patch bank needs at least {MIN_BANK} patches, got {count}")));
        }
        if images.is_empty() {
            return Err(QsError::config("no images to sample patches from"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 3 * k * k;
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let img = &images[rng.random_range(0..images.len())];
            let (c, h, w) = img.dims3("PatchBank::sample")?;
            if c != 3 || h < k || w < k {
                return Err(QsError::config(format!("image {:?} is too small for {k}×{k} patches", img.shape())));
            }
            let (y0, x0) = (rng.random_range(0..=h - k), rng.random_range(0..=w - k));
            for ch in 0..3 {
                for y in y0..y0 + k {
                    let row = &img.data()[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + k];
                    data.extend(row.iter().map(|&v| v as f64));
                }
            }
        }
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean over random unit directions of the 1-D Wasserstein-1 distance
/// between the projected banks. The larger bank is subsampled to the size
/// of the smaller one.
pub fn swd(a: &PatchBank, b: &PatchBank, projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(QsError::config("sliced Wasserstein distance of an empty bank"));
    }
    if a.dim != b.dim {
        return Err(QsError::config(format!("patch dimensions differ: {} vs {}", a.dim, b.dim)));
    }
    if projections == 0 {
        return Err(QsError::config("need at least one projection"));
    }
    let n = a.len().min(b.len());
    let mut sub_rng = ChaCha8Rng::seed_from_u64(seed);
    sub_rng.set_stream(1);
    let mut pick = |bank: &PatchBank| -> Vec<usize> {
        if bank.len() == n {
            (0..n).collect()
        } else {
            index::sample(&mut sub_rng, bank.len(), n).into_vec()
        }
    };
    let (ia, ib) = (pick(a), pick(b));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let dir = unit_vector(a.dim, &mut rng);
        let project = |bank: &PatchBank, idx: &[usize]| -> Vec<f64> {
            let mut p: Vec<f64> = idx
                .iter()
                .map(|&i| bank.patch(i).iter().zip(&dir).map(|(x, u)| x * u).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            p
        };
        let (pa, pb) = (project(a, &ia), project(b, &ib));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    Ok(total / projections as f64)
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Mean RGB in `[0, 1]` over the masked pixels of a `3×H×W` image in `[-1, 1]`.
pub fn masked_mean_color(image: &Tensor<f32>, mask: &[bool]) -> Result<[f64; 3]> {
    let (c, h, w) = image.dims3("masked_mean_color")?;
    if c != 3 || mask.len() != h * w {
        return Err(QsError::Alignment(format!("image {:?} vs mask of {}", image.shape(), mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(QsError::config("empty object mask"));
    }
    let plane = h * w;
    Ok(std::array::from_fn(|k| {
        let s: f64 = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(p, _)| image.data()[k * plane + p] as f64)
            .sum();
        (s / count as f64 + 1.0) / 2.0
    }))
}

/// Whether the object's mean color is closer to domain Y's palette than to X's.
pub fn looks_like_y(image: &Tensor<f32>, mask: &[bool], spec: &PaletteSpec) -> Result<bool> {
    let m = masked_mean_color(image, mask)?;
    let dist = |p: [f32; 3]| (0..3).map(|k| (m[k] - p[k] as f64).powi(2)).sum::<f64>();
    Ok(dist(spec.y.mean()) < dist(spec.x.mean()))
}

/// Fraction of images whose object region matches domain Y.
pub fn domain_score(images: &[Tensor<f32>], masks: &[Vec<bool>], spec: &PaletteSpec) -> Result<f64> {
    if images.len() != masks.len() {
        return Err(QsError::Alignment(format!("{} images vs {} masks", images.len(), masks.len())));
    }
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (img, mask) in images.iter().zip(masks) {
        if looks_like_y(img, mask, spec)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

/// Block-majority downsampling of a square `side×side` mask to `target×target`.
pub fn downsample_mask(mask: &[bool], side: usize, target: usize) -> Result<Vec<bool>> {
    if mask.len() != side * side || target == 0 || !side.is_multiple_of(target) {
        return Err(QsError::config(format!(
            "cannot downsample a {}-pixel mask of side {side} to side {target}",
            mask.len()
        )));
    }
    let f = side / target;
    Ok((0..target * target)
        .map(|t| {
            let (r, c) = (t / target, t % target);
            let inside = (0..f * f)
                .filter(|k| mask[(r * f + k / f) * side + c * f + k % f])
                .count();
            2 * inside >= f * f
        })
        .collect())
}

/// Fraction of `indices` that land on `true` cells of `mask`.
pub fn hit_rate(indices: &[usize], mask: &[bool]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    indices.iter().filter(|&&i| mask.get(i).copied().unwrap_or(false)).count() as f64 / indices.len() as f64
}
