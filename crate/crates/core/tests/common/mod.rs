//! Straightforward loop implementations used as independent references.
#![allow(dead_code)]

use qsattn::attn::{Domain, FeatureMap};
use qsattn_tensor::Tensor;
use rand::Rng;

pub fn random_map<R: Rng>(rng: &mut R, h: usize, w: usize, c: usize, layer: usize) -> FeatureMap {
    FeatureMap::new(Tensor::randn(vec![h, w, c], 1.0, rng), layer, Domain::SourceReal).unwrap()
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    for v in row.iter_mut() {
        *v = (*v - m).exp() / z;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn feature(f: &FeatureMap, r: usize, c: usize) -> &[f64] {
    let ch = f.channels();
    let i = (r * f.width() + c) * ch;
    &f.tensor().data()[i..i + ch]
}

/// Row-major `HW×HW` global attention.
pub fn global(f: &FeatureMap) -> Vec<Vec<f64>> {
    let (h, w) = (f.height(), f.width());
    let mut out = Vec::new();
    for i in 0..h * w {
        let q = feature(f, i / w, i % w);
        let mut row: Vec<f64> = (0..h * w).map(|j| dot(q, feature(f, j / w, j % w))).collect();
        softmax(&mut row);
        out.push(row);
    }
    out
}

/// Row-major `HW×w²` local attention with zero padding.
pub fn local(f: &FeatureMap, win: usize) -> Vec<Vec<f64>> {
    let (h, w) = (f.height() as isize, f.width() as isize);
    let half = (win / 2) as isize;
    let zero = vec![0.0; f.channels()];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let q = feature(f, r as usize, c as usize);
            let mut row = Vec::new();
            for dr in -half..=half {
                for dc in -half..=half {
                    let (nr, nc) = (r + dr, c + dc);
                    let k = if nr >= 0 && nr < h && nc >= 0 && nc < w {
                        feature(f, nr as usize, nc as usize)
                    } else {
                        &zero
                    };
                    row.push(dot(q, k));
                }
            }
            softmax(&mut row);
            out.push(row);
        }
    }
    out
}

pub fn entropy(row: &[f64]) -> f64 {
    row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
}

pub fn informer(f: &FeatureMap) -> Vec<f64> {
    let hw = f.hw();
    let (w, c) = (f.width(), f.channels() as f64);
    (0..hw)
        .map(|i| {
            let q = feature(f, i / w, i % w);
            let s: Vec<f64> = (0..hw).map(|j| dot(q, feature(f, j / w, j % w)) / c.sqrt()).collect();
            s.iter().copied().fold(f64::NEG_INFINITY, f64::max) - s.iter().sum::<f64>() / hw as f64
        })
        .collect()
}

/// Indices sorted by `(score, index)`, truncated to `n`.
pub fn smallest(scores: &[f64], n: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pairs.into_iter().take(n).map(|p| p.1).collect()
}

/// Indices sorted by descending score, ties by ascending index.
pub fn largest(scores: &[f64], n: usize) -> Vec<usize> {
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    smallest(&neg, n)
}

/// `Σ_j a[j] · value(j)` for a global row.
pub fn route_global(row: &[f64], f: &FeatureMap) -> Vec<f64> {
    let w = f.width();
    let mut out = vec![0.0; f.channels()];
    for (j, &a) in row.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(feature(f, j / w, j % w)) {
            *o += a * v;
        }
    }
    out
}

/// `Σ_k a[k] · value(neighbour k of i)` for a local row.
pub fn route_local(row: &[f64], i: usize, f: &FeatureMap, win: usize) -> Vec<f64> {
    let (h, w) = (f.height() as isize, f.width() as isize);
    let half = (win / 2) as isize;
    let (r, c) = ((i as isize) / w, (i as isize) % w);
    let mut out = vec![0.0; f.channels()];
    let mut k = 0;
    for dr in -half..=half {
        for dc in -half..=half {
            let (nr, nc) = (r + dr, c + dc);
            if nr >= 0 && nr < h && nc >= 0 && nc < w {
                for (o, v) in out.iter_mut().zip(feature(f, nr as usize, nc as usize)) {
                    *o += row[k] * v;
                }
            }
            k += 1;
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Naive InfoNCE over already-normalized rows.
pub fn nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = positives.iter().map(|k| dot(&anchors[i], k) / tau).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / n as f64
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (norm + 1e-7)).collect()
}

/// Two-layer perceptron `relu(x·w1 + b1)·w2 + b2` with row-major weights.
pub fn mlp(x: &[f64], w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Vec<f64> {
    let (c, d) = (w1.shape()[0], w1.shape()[1]);
    let hidden: Vec<f64> = (0..d)
        .map(|j| (b1.data()[j] + (0..c).map(|i| x[i] * w1.data()[i * d + j]).sum::<f64>()).max(0.0))
        .collect();
    let e = w2.shape()[1];
    (0..e)
        .map(|j| b2.data()[j] + (0..d).map(|i| hidden[i] * w2.data()[i * e + j]).sum::<f64>())
        .collect()
}
